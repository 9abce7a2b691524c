//! Subcommand implementations and artifact writers.

use std::fs;
use std::path::{Path, PathBuf};

use mtopt_core::driver::{self, CaseSummary, IterationRecord, RunOutcome, StudyMatrix};
use mtopt_core::export::{self, LayerOptions};
use mtopt_core::fem::Preset;
use mtopt_core::mesh::{AdaptiveMesh, CellKey, LevelBounds};
use mtopt_core::TargetSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{self, ConfigError, PresetName, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Run(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl CliError {
    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn mkdir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Final field with the mesh needed to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSnapshot {
    pub extents: (f64, f64),
    pub base_grid: (u32, u32),
    pub bounds: LevelBounds,
    pub targets: TargetSet,
    pub iteration: u32,
    pub cells: Vec<CellKey>,
    pub physical: Vec<f64>,
}

impl FieldSnapshot {
    pub fn new(mesh: &AdaptiveMesh<f64>, physical: &[f64], targets: TargetSet, iteration: u32) -> Self {
        Self {
            extents: mesh.extents(),
            base_grid: mesh.base_grid(),
            bounds: mesh.level_bounds(),
            targets,
            iteration,
            cells: mesh.cells().to_vec(),
            physical: physical.to_vec(),
        }
    }

    pub fn mesh(&self) -> Result<AdaptiveMesh<f64>, CliError> {
        AdaptiveMesh::from_cell_list(self.base_grid.0, self.base_grid.1, self.extents, self.bounds, self.cells.clone())
            .map_err(|e| CliError::Run(format!("snapshot mesh: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string(self).expect("snapshot serializes");
        fs::write(path, text).map_err(io_err(path))
    }
}

#[derive(Debug, Clone, Serialize)]
struct HistoryRow<'a> {
    #[serde(rename = "I")]
    iteration: u32,
    stage: &'a str,
    p: f64,
    beta: f64,
    compliance: f64,
    vol_frac: f64,
    delta_rho_mean: f64,
    cells: usize,
}

pub fn write_history(path: &Path, history: &[IterationRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    for r in history {
        w.serialize(HistoryRow {
            iteration: r.iteration,
            stage: r.stage.name(),
            p: r.p,
            beta: r.beta,
            compliance: r.compliance,
            vol_frac: r.vol_frac,
            delta_rho_mean: r.delta_rho_mean,
            cells: r.cells,
        })
        .map_err(|e| CliError::Run(e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub preset: String,
    pub vfrac: f64,
    pub targets: TargetSet,
    pub compliance: f64,
    pub volume: f64,
    pub cells: usize,
    pub iterations: usize,
    pub stop: driver::StopReason,
    pub final_stage: String,
}

/// Writes the history, stage snapshots, final field and summary of one case.
pub fn write_case_artifacts(
    dir: &Path,
    preset: PresetName,
    vfrac: f64,
    targets: TargetSet,
    out: &RunOutcome<f64>,
    with_vtk: bool,
) -> Result<RunSummary, CliError> {
    mkdir(dir)?;
    write_history(&dir.join("history.csv"), &out.history)?;
    if with_vtk {
        for s in &out.snapshots {
            let path = dir.join(format!("snapshot_{:03}_{}.vtk", s.iteration, s.stage.name()));
            export::write_vtk(&path, &s.mesh, &[("density", &s.physical)]).map_err(|e| CliError::Run(e.to_string()))?;
        }
    }
    let last = out.history.last().map_or(0, |r| r.iteration);
    FieldSnapshot::new(&out.mesh, &out.physical, targets, last).save(&dir.join("final.json"))?;
    let summary = RunSummary {
        preset: preset.to_string(),
        vfrac,
        targets,
        compliance: out.final_compliance,
        volume: out.final_volume,
        cells: out.mesh.n_cells(),
        iterations: out.history.len(),
        stop: out.stop,
        final_stage: out.state.stage.name().to_string(),
    };
    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes")).map_err(io_err(&path))?;
    Ok(summary)
}

pub fn cmd_run(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    let case = cfg.case_config()?;
    let targets = case.targets;
    let dir = cfg
        .output_dir()
        .join(config::case_name(cfg.case.preset, case.vbar, targets));
    println!("{}", cfg.header());
    mkdir(&dir)?;
    let echo = dir.join("config.toml");
    fs::write(&echo, cfg.to_toml()).map_err(io_err(&echo))?;
    let out = driver::run_case_with(&case, |r| {
        log::info!(
            "I={} {} p={:.4} beta={:.4} c={:.6e} v={:.6} d={:.3e} cells={}",
            r.iteration,
            r.stage,
            r.p,
            r.beta,
            r.compliance,
            r.vol_frac,
            r.delta_rho_mean,
            r.cells
        );
    });
    let out = match out {
        Ok(o) => o,
        Err(fail) => {
            write_history(&dir.join("history.csv"), &fail.history)?;
            return Err(CliError::Run(fail.to_string()));
        }
    };
    let summary = write_case_artifacts(&dir, cfg.case.preset, case.vbar, targets, &out, true)?;
    println!(
        "compliance={:.6e} volume={:.6} cells={} iterations={} stop={:?} dir={}",
        summary.compliance,
        summary.volume,
        summary.cells,
        summary.iterations,
        summary.stop,
        dir.display()
    );
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
struct StudyRow {
    benchmark: String,
    vfrac: f64,
    nt: String,
    compliance: Option<f64>,
    volume: Option<f64>,
    cells: Option<usize>,
    iterations: usize,
    gap_to_free_pct: Option<f64>,
    error: Option<String>,
}

/// Subset selection for the study matrix; empty lists keep the defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StudySelection {
    pub presets: Vec<PresetName>,
    pub vfracs: Vec<f64>,
    pub targets: Vec<TargetSet>,
}

pub fn cmd_study(cfg: &RunConfig, sel: &StudySelection, jobs: usize) -> Result<Vec<CaseSummary>, CliError> {
    let template = cfg.template()?;
    let mut matrix = StudyMatrix::default();
    if !sel.presets.is_empty() {
        matrix.benchmarks = sel.presets.iter().map(|p| p.preset()).collect();
        if matrix.benchmarks.contains(&Preset::Custom) {
            return Err(ConfigError::Invalid {
                field: "preset".into(),
                reason: "the study matrix uses the cantilever and mbb presets".into(),
            }
            .into());
        }
    }
    if !sel.vfracs.is_empty() {
        matrix.vfracs = sel.vfracs.clone();
    }
    if let Some(v) = matrix.vfracs.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(ConfigError::Invalid {
            field: "vfrac".into(),
            reason: format!("{v} outside (0, 1)"),
        }
        .into());
    }
    if !sel.targets.is_empty() {
        matrix.targets = sel.targets.clone();
    }
    let root = cfg.output_dir();
    mkdir(&root)?;
    println!("{}", cfg.header());
    let summaries = driver::run_study(&matrix, &template, jobs, |s, out| {
        let preset = PresetName::from_preset(s.benchmark);
        let dir = root.join(config::case_name(preset, s.vfrac, s.targets));
        match (out, &s.error) {
            (Some(out), _) => {
                if let Err(e) = write_case_artifacts(&dir, preset, s.vfrac, s.targets, out, false) {
                    log::error!("writing {}: {e}", dir.display());
                }
                println!(
                    "{preset} vfrac={:.2} nt={} compliance={:.6e} iterations={}",
                    s.vfrac,
                    s.targets,
                    s.compliance.unwrap_or(f64::NAN),
                    s.iterations
                );
            }
            (None, Some(err)) => println!("{preset} vfrac={:.2} nt={} FAILED: {err}", s.vfrac, s.targets),
            (None, None) => {}
        }
    });
    let path = root.join("study.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io {
        path: path.clone(),
        message: e.to_string(),
    })?;
    for s in &summaries {
        w.serialize(StudyRow {
            benchmark: PresetName::from_preset(s.benchmark).to_string(),
            vfrac: s.vfrac,
            nt: s.targets.to_string(),
            compliance: s.compliance,
            volume: s.volume,
            cells: s.cells,
            iterations: s.iterations,
            gap_to_free_pct: s.gap_to_free.map(|g| g * 100.0),
            error: s.error.clone(),
        })
        .map_err(|e| CliError::Run(e.to_string()))?;
    }
    w.flush().map_err(io_err(&path))?;
    println!("{}", gap_table(&summaries));
    Ok(summaries)
}

/// Compliance and gap-to-free table, one row per benchmark and volume fraction.
pub fn gap_table(summaries: &[CaseSummary]) -> String {
    let mut out = String::new();
    let mut keys: Vec<(Preset, f64)> = Vec::new();
    for s in summaries {
        if !keys.iter().any(|&(b, v)| b == s.benchmark && v == s.vfrac) {
            keys.push((s.benchmark, s.vfrac));
        }
    }
    for (b, v) in keys {
        out.push_str(&format!("{} vfrac={v:.2}:", PresetName::from_preset(b)));
        for s in summaries.iter().filter(|s| s.benchmark == b && s.vfrac == v) {
            match (s.compliance, s.gap_to_free) {
                (Some(c), Some(g)) => out.push_str(&format!("  nt={} {c:.4e} ({:+.1}%)", s.targets, g * 100.0)),
                (Some(c), None) => out.push_str(&format!("  nt={} {c:.4e}", s.targets)),
                _ => out.push_str(&format!("  nt={} failed", s.targets)),
            }
        }
        out.push('\n');
    }
    out
}

/// Exports SVG/DXF layers and an STL stack from a saved final field.
pub fn cmd_export(
    snapshot: &Path,
    targets: Option<TargetSet>,
    cfg: &RunConfig,
    out: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    cfg.check_export()?;
    let snap = FieldSnapshot::load(snapshot)?;
    if let Some(t) = targets {
        if t != snap.targets {
            return Err(CliError::Run(format!(
                "snapshot was optimized for nt={} but export requested nt={t}",
                snap.targets
            )));
        }
    }
    let mesh = snap.mesh()?;
    let stack =
        export::extract_contours(&mesh, &snap.physical, snap.targets).map_err(|e| CliError::Run(e.to_string()))?;
    let opts = LayerOptions {
        scale: cfg.export.scale,
        total_thickness: cfg.export.total_thickness,
    };
    let mut files = export::write_layers(&stack, out, &opts).map_err(|e| CliError::Run(e.to_string()))?;
    let tris = export::extrude_stack(&stack, &opts).map_err(|e| CliError::Run(e.to_string()))?;
    let stl = out.join("stack.stl");
    export::write_stl(&stl, &tris).map_err(|e| CliError::Run(e.to_string()))?;
    files.push(stl);
    let sheet = stack.sheet_thickness(opts.total_thickness);
    println!(
        "{} levels, sheet thickness {sheet:.2}mm per side, stack volume {:.1}mm^3",
        stack.levels.len(),
        export::mesh_volume(&tris)
    );
    Ok(files)
}
