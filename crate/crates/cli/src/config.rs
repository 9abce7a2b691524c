//! Run configuration: TOML sections plus command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use mtopt_core::driver::{AdaptConfig, CaseConfig, ContinuationConfig};
use mtopt_core::fem::{BvpSpec, Preset};
use mtopt_core::mesh::LevelBounds;
use mtopt_core::optimizer::OptimizerConfig;
use mtopt_core::regularization::FilterConfig;
use mtopt_core::TargetSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "MTOPT_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("missing required field `{0}`")]
    Missing(&'static str),
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PresetName {
    Cantilever,
    Mbb,
    Custom,
}

impl PresetName {
    pub fn preset(self) -> Preset {
        match self {
            PresetName::Cantilever => Preset::Cantilever,
            PresetName::Mbb => Preset::MbbHalf,
            PresetName::Custom => Preset::Custom,
        }
    }

    pub fn from_preset(p: Preset) -> Self {
        match p {
            Preset::Cantilever => PresetName::Cantilever,
            Preset::MbbHalf => PresetName::Mbb,
            Preset::Custom => PresetName::Custom,
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PresetName::Cantilever => "cantilever",
            PresetName::Mbb => "mbb",
            PresetName::Custom => "custom",
        })
    }
}

/// Target count written either as an integer or as a string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum NtValue {
    Count(u32),
    Text(String),
}

fn nt_de<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<TargetSet>, D::Error> {
    let raw: Option<NtValue> = Option::deserialize(d)?;
    raw.map(|v| match v {
        NtValue::Count(n) => TargetSet::levels(n),
        NtValue::Text(s) => s.parse(),
    })
    .transpose()
    .map_err(serde::de::Error::custom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaseSection {
    pub preset: PresetName,
    pub vfrac: Option<f64>,
    #[serde(deserialize_with = "nt_de")]
    pub nt: Option<TargetSet>,
    pub output: PathBuf,
    /// Reserved; the pipeline is deterministic.
    pub seed: u64,
}

impl Default for CaseSection {
    fn default() -> Self {
        Self {
            preset: PresetName::Cantilever,
            vfrac: None,
            nt: None,
            output: PathBuf::from("output"),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub enabled: bool,
    pub every: u32,
    pub c_r: f64,
    pub c_c: f64,
    pub min_level: u8,
    pub max_level: u8,
    pub initial_refines: u8,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let a = AdaptConfig::<f64>::default();
        Self {
            enabled: a.enabled,
            every: a.every,
            c_r: a.c_r,
            c_c: a.c_c,
            min_level: a.bounds.min,
            max_level: a.bounds.max,
            initial_refines: a.initial_refines,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopSection {
    pub max_iterations: u32,
    pub tolerance: f64,
}

impl Default for StopSection {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    /// Millimetres per length unit.
    pub scale: f64,
    /// Total stack thickness in millimetres.
    pub total_thickness: f64,
}

impl Default for ExportSection {
    fn default() -> Self {
        Self {
            scale: 10.0,
            total_thickness: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub case: CaseSection,
    /// Boundary value problem for `preset = "custom"`.
    pub bvp: Option<BvpSpec<f64>>,
    pub continuation: ContinuationConfig<f64>,
    pub filter: FilterConfig<f64>,
    pub optimizer: OptimizerConfig<f64>,
    pub adapt: AdaptSection,
    pub stop: StopSection,
    pub export: ExportSection,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub preset: Option<PresetName>,
    pub vfrac: Option<f64>,
    pub nt: Option<TargetSet>,
    pub max_level: Option<u8>,
    pub no_adapt: bool,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = o.preset {
            self.case.preset = p;
        }
        if let Some(v) = o.vfrac {
            self.case.vfrac = Some(v);
        }
        if let Some(t) = o.nt {
            self.case.nt = Some(t);
        }
        if let Some(m) = o.max_level {
            self.adapt.max_level = m;
            self.adapt.initial_refines = self.adapt.initial_refines.min(m);
            self.adapt.min_level = self.adapt.min_level.min(m);
        }
        if o.no_adapt {
            self.adapt.enabled = false;
        }
        if let Some(out) = &o.out {
            self.case.output = out.clone();
        }
    }

    pub fn targets(&self) -> TargetSet {
        self.case.nt.unwrap_or(TargetSet::Levels(1))
    }

    pub fn bvp(&self) -> Result<BvpSpec<f64>, ConfigError> {
        match self.case.preset {
            PresetName::Cantilever => Ok(BvpSpec::cantilever()),
            PresetName::Mbb => Ok(BvpSpec::mbb_half()),
            PresetName::Custom => self.bvp.clone().ok_or(ConfigError::Missing("bvp")),
        }
    }

    /// Case settings without a volume fraction requirement; `vbar` is a
    /// placeholder filled by the caller.
    pub fn template(&self) -> Result<CaseConfig<f64>, ConfigError> {
        let mut cfg = CaseConfig::new(self.bvp()?, self.case.vfrac.unwrap_or(0.5), self.targets());
        cfg.continuation = self.continuation;
        cfg.filter = self.filter;
        cfg.optimizer = self.optimizer;
        cfg.adapt = AdaptConfig {
            enabled: self.adapt.enabled,
            every: self.adapt.every,
            c_r: self.adapt.c_r,
            c_c: self.adapt.c_c,
            bounds: LevelBounds {
                min: self.adapt.min_level,
                max: self.adapt.max_level,
            },
            initial_refines: self.adapt.initial_refines,
        };
        cfg.max_iterations = self.stop.max_iterations;
        cfg.tolerance = self.stop.tolerance;
        cfg.validate().map_err(|e| match e {
            mtopt_core::driver::ConfigError::Invalid { field, reason } => ConfigError::Invalid {
                field: field.to_string(),
                reason,
            },
        })?;
        Ok(cfg)
    }

    /// Fully specified single case.
    pub fn case_config(&self) -> Result<CaseConfig<f64>, ConfigError> {
        let vfrac = self.case.vfrac.ok_or(ConfigError::Missing("vfrac"))?;
        if !(vfrac > 0.0 && vfrac < 1.0) {
            return Err(ConfigError::Invalid {
                field: "vfrac".into(),
                reason: format!("{vfrac} outside (0, 1)"),
            });
        }
        let mut cfg = self.template()?;
        cfg.vbar = vfrac;
        Ok(cfg)
    }

    pub fn check_export(&self) -> Result<(), ConfigError> {
        for (field, v) in [("scale", self.export.scale), ("total_thickness", self.export.total_thickness)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid {
                    field: field.into(),
                    reason: format!("{v} must be positive"),
                });
            }
        }
        Ok(())
    }

    /// Output directory after applying the output-root variable.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.case.output)
    }

    /// Constants echoed at the start of every run.
    pub fn header(&self) -> String {
        let c = &self.continuation;
        format!(
            "p_init={} beta_init={} c_p={} c_beta={} p_max={} beta_max={} trigger={} \
             c_r={} c_c={} r={} epsilon={} I_max={} move={} sharp_move={} damping={}",
            c.p_init,
            c.beta_init,
            c.c_p,
            c.c_beta,
            c.p_max,
            c.beta_max,
            c.trigger,
            self.adapt.c_r,
            self.adapt.c_c,
            self.filter.radius,
            self.stop.tolerance,
            self.stop.max_iterations,
            self.optimizer.move_limit,
            self.optimizer.sharp_move_limit,
            self.optimizer.damping,
        )
    }
}

pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Directory name for one case, e.g. `cantilever_v0.30_nt3`.
pub fn case_name(preset: PresetName, vfrac: f64, targets: TargetSet) -> String {
    format!("{preset}_v{vfrac:.2}_nt{targets}")
}
