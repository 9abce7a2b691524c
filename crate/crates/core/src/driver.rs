//! Optimization loop, continuation schedule and study runner.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fem::{self, BvpSpec, ElasticSystem, FemError, Preset};
use crate::linalg::LinalgError;
use crate::material::{self, TargetSet};
use crate::mesh::{AdaptiveMesh, LevelBounds, MeshError};
use crate::optimizer::{self, OptimizerConfig, OptimizerError};
use crate::regularization::{self, FilterConfig, FilterSystem, ProjectionConfig};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Unpenalized,
    PRamp,
    BetaRamp,
    FineTune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Unpenalized => "unpenalized",
            Stage::PRamp => "p-ramp",
            Stage::BetaRamp => "beta-ramp",
            Stage::FineTune => "fine-tune",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuationConfig<T> {
    pub p_init: T,
    pub beta_init: T,
    pub c_p: T,
    pub c_beta: T,
    pub p_max: T,
    pub beta_max: T,
    /// Mean design change that ends the unpenalized stage.
    pub trigger: T,
}

impl<T: Scalar> Default for ContinuationConfig<T> {
    fn default() -> Self {
        Self {
            p_init: T::one(),
            beta_init: T::lit(0.1),
            c_p: T::lit(1.03),
            c_beta: T::lit(1.2),
            p_max: T::lit(3.0),
            beta_max: T::lit(50.0),
            trigger: T::lit(1e-3),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

impl<T: Scalar> ContinuationConfig<T> {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.p_init >= T::one()) {
            return Err(invalid("p_init", "must be at least 1"));
        }
        if !(self.c_p > T::one()) {
            return Err(invalid("c_p", format!("{} must exceed 1", self.c_p)));
        }
        if !(self.c_beta > T::one()) {
            return Err(invalid("c_beta", format!("{} must exceed 1", self.c_beta)));
        }
        if !(self.p_max >= self.p_init) {
            return Err(invalid("p_max", "below p_init"));
        }
        if !(self.beta_init > T::zero() && self.beta_max >= self.beta_init) {
            return Err(invalid("beta_max", "must satisfy 0 < beta_init <= beta_max"));
        }
        if !(self.trigger > T::zero()) {
            return Err(invalid("trigger", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuationState<T> {
    pub stage: Stage,
    pub p: T,
    pub beta: T,
    pub p_steps: u32,
    pub beta_steps: u32,
}

impl<T: Scalar> ContinuationState<T> {
    pub fn new(cfg: &ContinuationConfig<T>) -> Self {
        Self {
            stage: Stage::Unpenalized,
            p: cfg.p_init,
            beta: cfg.beta_init,
            p_steps: 0,
            beta_steps: 0,
        }
    }
}

/// Advances the schedule by one optimization iteration.
pub fn continuation_step<T: Scalar>(
    state: ContinuationState<T>,
    delta_rho_mean: T,
    cfg: &ContinuationConfig<T>,
) -> ContinuationState<T> {
    let mut s = state;
    match s.stage {
        Stage::Unpenalized => {
            if delta_rho_mean < cfg.trigger {
                s.stage = Stage::PRamp;
            }
        }
        Stage::PRamp => {
            s.p = (s.p * cfg.c_p).min(cfg.p_max);
            s.p_steps += 1;
            if s.p >= cfg.p_max {
                s.stage = Stage::BetaRamp;
            }
        }
        Stage::BetaRamp => {
            s.beta = (s.beta * cfg.c_beta).min(cfg.beta_max);
            s.beta_steps += 1;
            if s.beta >= cfg.beta_max {
                s.stage = Stage::FineTune;
            }
        }
        Stage::FineTune => {}
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig<T> {
    pub enabled: bool,
    /// Adapt after every `every`-th iteration.
    pub every: u32,
    pub c_r: T,
    pub c_c: T,
    pub bounds: LevelBounds,
    pub initial_refines: u8,
}

impl<T: Scalar> Default for AdaptConfig<T> {
    fn default() -> Self {
        Self {
            enabled: true,
            every: 5,
            c_r: T::lit(0.2),
            c_c: T::lit(1e-3),
            bounds: LevelBounds::default(),
            initial_refines: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseConfig<T> {
    pub bvp: BvpSpec<T>,
    pub vbar: T,
    pub targets: TargetSet,
    pub continuation: ContinuationConfig<T>,
    pub filter: FilterConfig<T>,
    pub optimizer: OptimizerConfig<T>,
    pub adapt: AdaptConfig<T>,
    pub max_iterations: u32,
    /// Mean design change that ends the fine-tune stage.
    pub tolerance: T,
}

impl<T: Scalar> CaseConfig<T> {
    pub fn new(bvp: BvpSpec<T>, vbar: T, targets: TargetSet) -> Self {
        Self {
            bvp,
            vbar,
            targets,
            continuation: ContinuationConfig::default(),
            filter: FilterConfig::default(),
            optimizer: OptimizerConfig::default(),
            adapt: AdaptConfig::default(),
            max_iterations: 200,
            tolerance: T::lit(1e-4),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.vbar > T::zero() && self.vbar < T::one()) {
            return Err(invalid("vfrac", format!("{} outside (0, 1)", self.vbar)));
        }
        self.continuation.validate()?;
        if !(self.filter.radius >= T::zero()) {
            return Err(invalid("filter_radius", "must be non-negative"));
        }
        let o = &self.optimizer;
        if !(o.move_limit > T::zero() && o.move_limit <= T::one()) {
            return Err(invalid("move_limit", "must lie in (0, 1]"));
        }
        if !(o.sharp_move_limit > T::zero() && o.sharp_move_limit <= T::one()) {
            return Err(invalid("sharp_move_limit", "must lie in (0, 1]"));
        }
        if !(o.damping > T::zero() && o.damping <= T::one()) {
            return Err(invalid("damping", "must lie in (0, 1]"));
        }
        let a = &self.adapt;
        if a.every == 0 {
            return Err(invalid("adapt_every", "must be at least 1"));
        }
        if !(a.c_c < a.c_r) {
            return Err(invalid("c_c", "must be below c_r"));
        }
        if a.bounds.min > a.bounds.max {
            return Err(invalid("min_level", "above max_level"));
        }
        if a.initial_refines < a.bounds.min || a.initial_refines > a.bounds.max {
            return Err(invalid("initial_refines", "outside the level bounds"));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations", "must be at least 1"));
        }
        if !(self.tolerance > T::zero()) {
            return Err(invalid("tolerance", "must be positive"));
        }
        self.bvp
            .validate()
            .map_err(|e| invalid("bvp", e.to_string()))
    }

    fn projection(&self, beta: T) -> ProjectionConfig<T> {
        ProjectionConfig::new(beta, self.targets)
    }

    fn initial_mesh(&self) -> Result<AdaptiveMesh<T>, MeshError> {
        let (nx, ny) = self.bvp.base_grid;
        AdaptiveMesh::build_with_bounds(nx, ny, self.bvp.extents, self.adapt.initial_refines, self.adapt.bounds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub stage: Stage,
    pub p: f64,
    pub beta: f64,
    /// Compliance of the analyzed design.
    pub compliance: f64,
    /// Volume fraction of the accepted design.
    pub vol_frac: f64,
    pub delta_rho_mean: f64,
    pub cells: usize,
    /// Constraint value `vol_frac - vbar` of the accepted design.
    pub g_vol: f64,
    pub constraint_active: bool,
}

#[derive(Debug, Clone)]
pub struct Snapshot<T> {
    pub iteration: u32,
    /// Stage that ended at this iteration.
    pub stage: Stage,
    pub mesh: AdaptiveMesh<T>,
    pub physical: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct RunOutcome<T> {
    pub mesh: AdaptiveMesh<T>,
    pub design: Vec<T>,
    pub physical: Vec<T>,
    pub history: Vec<IterationRecord>,
    pub final_compliance: T,
    pub final_volume: T,
    pub state: ContinuationState<T>,
    pub stop: StopReason,
    pub snapshots: Vec<Snapshot<T>>,
    /// Largest 2:1 balance violation count seen after any adaptation.
    pub balance_violations: usize,
    pub adaptations: u32,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DriverError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("filter: {0}")]
    Filter(#[from] LinalgError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
}

/// A failed case together with the iterations completed before the error.
#[derive(Debug, Error, Clone)]
#[error("case failed after {} iterations: {error}", history.len())]
pub struct CaseFailure {
    pub error: DriverError,
    pub history: Vec<IterationRecord>,
}

/// Compliance, volume and their design gradients at one design.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub physical: Vec<T>,
    pub compliance: T,
    pub volume: T,
    pub compliance_gradient: Vec<T>,
    pub volume_gradient: Vec<T>,
}

/// Filter, projection and elastic operators for one mesh.
#[derive(Debug, Clone)]
pub struct CaseOperators<T> {
    elastic: ElasticSystem<T>,
    filter: FilterSystem<T>,
    volume_weights: Vec<T>,
}

impl<T: Scalar> CaseOperators<T> {
    pub fn new(mesh: &AdaptiveMesh<T>, cfg: &CaseConfig<T>) -> Result<Self, DriverError> {
        let total = mesh.total_area();
        Ok(Self {
            elastic: ElasticSystem::new(mesh, &cfg.bvp)?,
            filter: FilterSystem::new(mesh, &cfg.filter)?,
            volume_weights: mesh.cell_areas().into_iter().map(|a| a / total).collect(),
        })
    }

    /// Physical densities and projection slopes of a design.
    pub fn physical(&self, design: &[T], proj: &ProjectionConfig<T>) -> (Vec<T>, Vec<T>) {
        regularization::project_field(&self.filter.apply(design), proj)
    }

    /// Area-weighted mean of a cell field.
    pub fn volume(&self, physical: &[T]) -> T {
        physical.iter().zip(&self.volume_weights).map(|(&r, &w)| r * w).sum()
    }

    /// Forward analysis and adjoint sensitivities through
    /// SIMP, projection and filter.
    pub fn evaluate(
        &self,
        mesh: &AdaptiveMesh<T>,
        design: &[T],
        targets: TargetSet,
        p: T,
        beta: T,
        e0: T,
    ) -> Result<Evaluation<T>, FemError> {
        let proj = ProjectionConfig::new(beta, targets);
        let (physical, dproj) = self.physical(design, &proj);
        let (moduli, dmod) = material::modulus_field(&physical, p, targets, e0);
        let result = self.elastic.solve(mesh, &moduli)?;
        let dc_phys = fem::compliance_sensitivity(&result, &dmod);
        let dc_filt: Vec<T> = dc_phys.iter().zip(&dproj).map(|(&g, &h)| g * h).collect();
        let dv_filt: Vec<T> = self.volume_weights.iter().zip(&dproj).map(|(&w, &h)| w * h).collect();
        Ok(Evaluation {
            volume: self.volume(&physical),
            physical,
            compliance: result.compliance,
            compliance_gradient: self.filter.adjoint(&dc_filt),
            volume_gradient: self.filter.adjoint(&dv_filt),
        })
    }
}

/// Runs one case without a per-iteration observer.
pub fn run_case<T: Scalar>(cfg: &CaseConfig<T>) -> Result<RunOutcome<T>, CaseFailure> {
    run_case_with(cfg, |_| {})
}

/// Runs one case, calling `observe` after every accepted iteration.
pub fn run_case_with<T, F>(cfg: &CaseConfig<T>, mut observe: F) -> Result<RunOutcome<T>, CaseFailure>
where
    T: Scalar,
    F: FnMut(&IterationRecord),
{
    let mut history = Vec::new();
    match run_inner(cfg, &mut history, &mut observe) {
        Ok(out) => Ok(out),
        Err(error) => Err(CaseFailure { error, history }),
    }
}

fn run_inner<T, F>(
    cfg: &CaseConfig<T>,
    history: &mut Vec<IterationRecord>,
    observe: &mut F,
) -> Result<RunOutcome<T>, DriverError>
where
    T: Scalar,
    F: FnMut(&IterationRecord),
{
    cfg.validate()?;
    let free = cfg.targets.is_free();
    let spacing: T = cfg.targets.spacing();
    let e0 = cfg.bvp.e0;

    let mut mesh = cfg.initial_mesh()?;
    let mut ops = CaseOperators::new(&mesh, cfg)?;
    let mut design = vec![cfg.vbar; mesh.n_cells()];
    let mut state = ContinuationState::new(&cfg.continuation);
    let mut snapshots = Vec::new();
    let mut stop = StopReason::MaxIterations;
    let mut balance_violations = 0;
    let mut adaptations = 0;

    for iteration in 1..=cfg.max_iterations {
        let proj = cfg.projection(state.beta);
        let eval = ops.evaluate(&mesh, &design, cfg.targets, state.p, state.beta, e0)?;
        let mut opt = cfg.optimizer.clone();
        if matches!(state.stage, Stage::BetaRamp | Stage::FineTune) {
            opt.move_limit = opt.sharp_move_limit;
        }
        let outcome = optimizer::oc_update(
            &design,
            &eval.compliance_gradient,
            &eval.volume_gradient,
            cfg.vbar,
            &opt,
            |cand| ops.volume(&ops.physical(cand, &proj).0),
        )?;
        let delta = optimizer::mean_change(&design, &outcome.design);
        design = outcome.design;

        let record = IterationRecord {
            iteration,
            stage: state.stage,
            p: if free { 1.0 } else { state.p.as_f64() },
            beta: state.beta.as_f64(),
            compliance: eval.compliance.as_f64(),
            vol_frac: outcome.volume.as_f64(),
            delta_rho_mean: delta.as_f64(),
            cells: mesh.n_cells(),
            g_vol: (outcome.volume - cfg.vbar).as_f64(),
            constraint_active: outcome.active,
        };
        log::debug!(
            "I={iteration} {} p={:.4} beta={:.4} c={:.6e} v={:.6} d={:.3e} cells={}",
            record.stage,
            record.p,
            record.beta,
            record.compliance,
            record.vol_frac,
            record.delta_rho_mean,
            record.cells
        );
        observe(&record);
        history.push(record);

        let converged = if free {
            delta <= cfg.tolerance
        } else {
            state.stage == Stage::FineTune && delta <= cfg.tolerance
        };
        if !free {
            let next = continuation_step(state, delta, &cfg.continuation);
            if next.stage != state.stage {
                snapshots.push(Snapshot {
                    iteration,
                    stage: state.stage,
                    mesh: mesh.clone(),
                    physical: ops.physical(&design, &cfg.projection(state.beta)).0,
                });
            }
            state = next;
        }
        if converged {
            stop = StopReason::Converged;
            break;
        }

        if cfg.adapt.enabled && iteration % cfg.adapt.every == 0 && iteration < cfg.max_iterations {
            let current = ops.physical(&design, &cfg.projection(state.beta)).0;
            let plan = mesh.plan_adaptation(&current, spacing, cfg.adapt.c_r, cfg.adapt.c_c)?;
            if plan.stats.changed() {
                design = plan.transfer(&design);
                mesh = plan.mesh;
                balance_violations = balance_violations.max(mesh.balance_violations().len());
                ops = CaseOperators::new(&mesh, cfg)?;
                adaptations += 1;
                log::debug!(
                    "adapted: +{} refined, {} forced, -{} coarsened, {} cells",
                    plan.stats.refined,
                    plan.stats.forced,
                    plan.stats.coarsened,
                    mesh.n_cells()
                );
            }
        }
    }

    let proj = cfg.projection(state.beta);
    let (physical, _) = ops.physical(&design, &proj);
    let (moduli, _) = material::modulus_field(&physical, state.p, cfg.targets, e0);
    let final_compliance = ops.elastic.solve(&mesh, &moduli)?.compliance;
    let final_volume = ops.volume(&physical);
    snapshots.push(Snapshot {
        iteration: history.last().map_or(0, |r| r.iteration),
        stage: state.stage,
        mesh: mesh.clone(),
        physical: physical.clone(),
    });
    Ok(RunOutcome {
        mesh,
        design,
        physical,
        history: std::mem::take(history),
        final_compliance,
        final_volume,
        state,
        stop,
        snapshots,
        balance_violations,
        adaptations,
    })
}

/// Area fraction of the domain where the physical density lies farther
/// than `tol` from every target.
pub fn off_target_fraction<T: Scalar>(mesh: &AdaptiveMesh<T>, physical: &[T], targets: TargetSet, tol: T) -> T {
    let total = mesh.total_area();
    physical
        .iter()
        .enumerate()
        .filter(|(_, &r)| targets.distance_to_nearest(r) > tol)
        .map(|(c, _)| mesh.cell_area(c))
        .sum::<T>()
        / total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMatrix {
    pub benchmarks: Vec<Preset>,
    pub vfracs: Vec<f64>,
    pub targets: Vec<TargetSet>,
}

impl Default for StudyMatrix {
    fn default() -> Self {
        Self {
            benchmarks: vec![Preset::Cantilever, Preset::MbbHalf],
            vfracs: vec![0.2, 0.3, 0.5],
            targets: [1, 2, 3, 4, 8]
                .into_iter()
                .map(TargetSet::Levels)
                .chain([TargetSet::Free])
                .collect(),
        }
    }
}

impl StudyMatrix {
    pub fn cases(&self) -> Vec<(Preset, f64, TargetSet)> {
        let mut out = Vec::new();
        for &b in &self.benchmarks {
            for &v in &self.vfracs {
                for &t in &self.targets {
                    out.push((b, v, t));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub benchmark: Preset,
    pub vfrac: f64,
    pub targets: TargetSet,
    pub compliance: Option<f64>,
    pub volume: Option<f64>,
    pub cells: Option<usize>,
    pub iterations: usize,
    /// Relative compliance excess over the free case with the same volume.
    pub gap_to_free: Option<f64>,
    pub error: Option<String>,
}

pub fn preset_bvp<T: Scalar>(preset: Preset) -> Option<BvpSpec<T>> {
    match preset {
        Preset::Cantilever => Some(BvpSpec::cantilever()),
        Preset::MbbHalf => Some(BvpSpec::mbb_half()),
        Preset::Custom => None,
    }
}

/// Runs every case of the matrix, `template` supplying all settings other
/// than benchmark, volume fraction and target set. Cases run on at most
/// `jobs` threads.
pub fn run_study<F>(
    matrix: &StudyMatrix,
    template: &CaseConfig<f64>,
    jobs: usize,
    on_case: F,
) -> Vec<CaseSummary>
where
    F: Fn(&CaseSummary, Option<&RunOutcome<f64>>) + Sync,
{
    use rayon::prelude::*;

    let cases = matrix.cases();
    let run = |&(b, v, t): &(Preset, f64, TargetSet)| -> CaseSummary {
        let mut cfg = template.clone();
        if let Some(bvp) = preset_bvp(b) {
            cfg.bvp = bvp;
        }
        cfg.vbar = v;
        cfg.targets = t;
        let base = CaseSummary {
            benchmark: b,
            vfrac: v,
            targets: t,
            compliance: None,
            volume: None,
            cells: None,
            iterations: 0,
            gap_to_free: None,
            error: None,
        };
        match run_case(&cfg) {
            Ok(out) => {
                let s = CaseSummary {
                    compliance: Some(out.final_compliance),
                    volume: Some(out.final_volume),
                    cells: Some(out.mesh.n_cells()),
                    iterations: out.history.len(),
                    ..base
                };
                on_case(&s, Some(&out));
                s
            }
            Err(fail) => {
                let s = CaseSummary {
                    iterations: fail.history.len(),
                    error: Some(fail.error.to_string()),
                    ..base
                };
                on_case(&s, None);
                s
            }
        }
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build();
    let mut summaries: Vec<CaseSummary> = match pool {
        Ok(pool) => pool.install(|| cases.par_iter().map(run).collect()),
        Err(_) => cases.iter().map(run).collect(),
    };
    fill_gaps(&mut summaries);
    summaries
}

/// Fills `gap_to_free` from the free case with matching benchmark and
/// volume fraction.
pub fn fill_gaps(summaries: &mut [CaseSummary]) {
    let free: Vec<(Preset, f64, f64)> = summaries
        .iter()
        .filter(|s| s.targets.is_free())
        .filter_map(|s| s.compliance.map(|c| (s.benchmark, s.vfrac, c)))
        .collect();
    for s in summaries.iter_mut() {
        s.gap_to_free = s.compliance.and_then(|c| {
            free.iter()
                .find(|&&(b, v, _)| b == s.benchmark && v == s.vfrac)
                .map(|&(_, _, cf)| (c - cf) / cf)
        });
    }
}
