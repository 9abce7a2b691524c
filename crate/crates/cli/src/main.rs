use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtopt_cli::commands::{self, CliError, StudySelection};
use mtopt_cli::config::{self, Overrides, PresetName, RunConfig};
use mtopt_cli::verify;
use mtopt_core::TargetSet;

#[derive(Parser)]
#[command(name = "mtopt", version, about = "Multi-thickness topology optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Common {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Finest refinement level.
    #[arg(long)]
    max_level: Option<u8>,
    /// Keep the initial uniform mesh.
    #[arg(long)]
    no_adapt: bool,
    /// Output directory (relative paths honour MTOPT_OUTPUT_ROOT).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize one case.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        preset: Option<PresetName>,
        /// Target volume fraction in (0, 1).
        #[arg(long)]
        vfrac: Option<f64>,
        /// Number of target thicknesses, or `free`.
        #[arg(long)]
        nt: Option<TargetSet>,
    },
    /// Run the benchmark matrix (or a subset) and write a summary table.
    Study {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, value_delimiter = ',')]
        preset: Vec<PresetName>,
        #[arg(long, value_delimiter = ',')]
        vfrac: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        nt: Vec<TargetSet>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write SVG/DXF sheet profiles and an STL stack from a final field.
    Export {
        /// `final.json` written by `run` or `study`.
        snapshot: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Expected target count; must match the snapshot.
        #[arg(long)]
        nt: Option<TargetSet>,
        /// Millimetres per length unit.
        #[arg(long)]
        scale: Option<f64>,
        /// Total stack thickness in millimetres.
        #[arg(long)]
        thickness: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the fast property suite.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load(path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn common_overrides(c: &Common) -> Overrides {
    Overrides {
        max_level: c.max_level,
        no_adapt: c.no_adapt,
        out: c.out.clone(),
        ..Overrides::default()
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            common,
            preset,
            vfrac,
            nt,
        } => {
            let mut cfg = load(common.config.as_ref())?;
            cfg.apply(&Overrides {
                preset,
                vfrac,
                nt,
                ..common_overrides(&common)
            });
            commands::cmd_run(&cfg).map(|_| ())
        }
        Command::Study {
            common,
            preset,
            vfrac,
            nt,
            jobs,
        } => {
            let mut cfg = load(common.config.as_ref())?;
            cfg.apply(&common_overrides(&common));
            let sel = StudySelection {
                presets: preset,
                vfracs: vfrac,
                targets: nt,
            };
            let summaries = commands::cmd_study(&cfg, &sel, jobs)?;
            let failed = summaries.iter().filter(|s| s.error.is_some()).count();
            if failed > 0 {
                eprintln!("{failed} of {} cases failed", summaries.len());
            }
            Ok(())
        }
        Command::Export {
            snapshot,
            config: cfg_path,
            nt,
            scale,
            thickness,
            out,
        } => {
            let mut cfg = load(cfg_path.as_ref())?;
            if let Some(s) = scale {
                cfg.export.scale = s;
            }
            if let Some(t) = thickness {
                cfg.export.total_thickness = t;
            }
            let out = match out {
                Some(o) => config::resolve_output(&o),
                None => snapshot.parent().map(|p| p.join("export")).unwrap_or_else(|| "export".into()),
            };
            let files = commands::cmd_export(&snapshot, nt, &cfg, &out)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Verify { config: cfg_path } => {
            let cfg = load(cfg_path.as_ref())?;
            let checks = verify::run_suite(&cfg);
            let mut failed = 0;
            for c in &checks {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                Err(CliError::Run(format!("{failed} of {} checks failed", checks.len())))
            } else {
                Ok(())
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
