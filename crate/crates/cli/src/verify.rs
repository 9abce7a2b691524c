//! Fast self-check suite run by `mtopt verify`.

use mtopt_core::driver::{continuation_step, CaseConfig, CaseOperators, ContinuationState, Stage};
use mtopt_core::fem::{BvpSpec, DirichletRegion, ElasticSystem, Preset, TractionRegion};
use mtopt_core::mesh::{AdaptiveMesh, Side};
use mtopt_core::regularization::{self, FilterSystem, ProjectionConfig};
use mtopt_core::TargetSet;

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed,
            detail: detail.into(),
        }
    }

    fn failed(name: &'static str, detail: impl Into<String>) -> Self {
        Self::new(name, false, detail)
    }
}

/// Runs every property check against the configured constants.
pub fn run_suite(cfg: &RunConfig) -> Vec<Check> {
    vec![
        continuation_counts(cfg),
        solver_available(),
        gradient_check(cfg),
        filter_conservation(cfg),
        filter_adjoint(cfg),
        projection_fixed_points(cfg),
        mesh_balance(cfg),
    ]
}

fn continuation_counts(cfg: &RunConfig) -> Check {
    const NAME: &str = "continuation counts (p-ramp 38, beta-ramp 35)";
    let c = cfg.continuation;
    if let Err(e) = c.validate() {
        return Check::failed(NAME, e.to_string());
    }
    let mut s = ContinuationState::new(&c);
    s = continuation_step(s, 0.0, &c);
    let (mut p_steps, mut b_steps) = (0, 0);
    while s.stage == Stage::PRamp && p_steps < 10_000 {
        s = continuation_step(s, 0.0, &c);
        p_steps += 1;
    }
    while s.stage == Stage::BetaRamp && b_steps < 10_000 {
        s = continuation_step(s, 0.0, &c);
        b_steps += 1;
    }
    Check::new(
        NAME,
        p_steps == 38 && b_steps == 35,
        format!("p-ramp {p_steps} steps, beta-ramp {b_steps} steps"),
    )
}

fn tiny_bvp() -> BvpSpec<f64> {
    BvpSpec {
        preset: Preset::Custom,
        extents: (4.0, 2.0),
        base_grid: (4, 2),
        dirichlet: vec![DirichletRegion {
            side: Side::West,
            from: 0.0,
            to: 2.0,
            fix: [true, true],
        }],
        tractions: vec![TractionRegion {
            side: Side::East,
            from: 0.9,
            to: 1.1,
            traction: [0.0, -5.0],
        }],
        e0: 1.0,
        nu: 0.3,
    }
}

fn solver_available() -> Check {
    const NAME: &str = "sparse solver";
    let mesh = match AdaptiveMesh::build_initial(4, 2, (4.0, 2.0), 0) {
        Ok(m) => m,
        Err(e) => return Check::failed(NAME, e.to_string()),
    };
    let result = ElasticSystem::new(&mesh, &tiny_bvp()).and_then(|sys| sys.solve(&mesh, &vec![1.0; mesh.n_cells()]));
    match result {
        Ok(r) if r.compliance.is_finite() && r.compliance > 0.0 => {
            Check::new(NAME, true, format!("compliance {:.6e}, residual {:.1e}", r.compliance, r.residual))
        }
        Ok(r) => Check::failed(NAME, format!("non-physical compliance {}", r.compliance)),
        Err(e) => Check::failed(NAME, format!("solver unavailable: {e}")),
    }
}

/// Deterministic design in (0.1, 0.9).
fn wavy(n: usize, k: f64) -> Vec<f64> {
    (0..n).map(|i| 0.5 + 0.4 * (k * (i as f64 + 1.0)).sin()).collect()
}

fn gradient_check(cfg: &RunConfig) -> Check {
    const NAME: &str = "full-chain gradient vs finite differences";
    let targets = TargetSet::Levels(3);
    let mesh = match AdaptiveMesh::build_initial(4, 2, (4.0, 2.0), 1) {
        Ok(m) => m,
        Err(e) => return Check::failed(NAME, e.to_string()),
    };
    let mut case = CaseConfig::new(tiny_bvp(), 0.4, targets);
    case.filter = cfg.filter;
    let ops = match CaseOperators::new(&mesh, &case) {
        Ok(o) => o,
        Err(e) => return Check::failed(NAME, e.to_string()),
    };
    let (p, beta) = (cfg.continuation.p_max, 4.0);
    let proj = ProjectionConfig::new(beta, targets);
    let design = wavy(mesh.n_cells(), 1.37);
    let phys = ops.physical(&design, &proj).0;
    let eval = match ops.evaluate(&mesh, &design, targets, p, beta, 1.0) {
        Ok(e) => e,
        Err(e) => return Check::failed(NAME, e.to_string()),
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut tested = 0;
    for c in 0..mesh.n_cells() {
        if targets.distance_to_nearest(phys[c]) < 0.02 {
            continue;
        }
        let f = |d: f64| {
            let mut x = design.clone();
            x[c] += d;
            ops.evaluate(&mesh, &x, targets, p, beta, 1.0).map(|e| e.compliance)
        };
        let (up, dn) = match (f(h), f(-h)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return Check::failed(NAME, "solve failed during differencing"),
        };
        let fd = (up - dn) / (2.0 * h);
        worst = worst.max((eval.compliance_gradient[c] - fd).abs() / fd.abs().max(1e-12));
        tested += 1;
    }
    Check::new(
        NAME,
        tested > 0 && worst < 1e-4,
        format!("{tested} cells, worst relative error {worst:.2e}"),
    )
}

fn adapted_mesh(cfg: &RunConfig) -> Result<AdaptiveMesh<f64>, String> {
    let mesh = AdaptiveMesh::<f64>::build_initial(6, 3, (6.0, 3.0), 1).map_err(|e| e.to_string())?;
    let field: Vec<f64> = (0..mesh.n_cells())
        .map(|c| {
            let [x, y] = mesh.cell_center(c);
            if (x - 3.0).powi(2) + (y - 1.5).powi(2) < 1.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let plan = mesh
        .plan_adaptation(&field, 1.0, cfg.adapt.c_r, cfg.adapt.c_c)
        .map_err(|e| e.to_string())?;
    Ok(plan.mesh)
}

fn filter_conservation(cfg: &RunConfig) -> Check {
    const NAME: &str = "filter mass conservation and constant fixed point";
    let mesh = match adapted_mesh(cfg) {
        Ok(m) => m,
        Err(e) => return Check::failed(NAME, e),
    };
    let f = match FilterSystem::new(&mesh, &cfg.filter) {
        Ok(f) => f,
        Err(e) => return Check::failed(NAME, e.to_string()),
    };
    let areas = mesh.cell_areas();
    let x = wavy(mesh.n_cells(), 0.71);
    let y = f.apply_linear(&x);
    let mass = |v: &[f64]| v.iter().zip(&areas).map(|(a, b)| a * b).sum::<f64>();
    let mass_err = (mass(&x) - mass(&y)).abs() / mass(&x);
    let c = f.apply(&vec![0.37; mesh.n_cells()]);
    let const_err = c.iter().map(|v| (v - 0.37).abs()).fold(0.0, f64::max);
    Check::new(
        NAME,
        mass_err < 1e-10 && const_err < 1e-10,
        format!("{} cells, mass error {mass_err:.1e}, constant error {const_err:.1e}", mesh.n_cells()),
    )
}

fn filter_adjoint(cfg: &RunConfig) -> Check {
    const NAME: &str = "filter adjoint inner-product identity";
    let mesh = match adapted_mesh(cfg) {
        Ok(m) => m,
        Err(e) => return Check::failed(NAME, e),
    };
    let f = match FilterSystem::new(&mesh, &cfg.filter) {
        Ok(f) => f,
        Err(e) => return Check::failed(NAME, e.to_string()),
    };
    let x = wavy(mesh.n_cells(), 0.53);
    let g = wavy(mesh.n_cells(), 2.11);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let lhs = dot(&g, &f.apply_linear(&x));
    let rhs = dot(&f.adjoint(&g), &x);
    let rel = (lhs - rhs).abs() / lhs.abs().max(1e-300);
    Check::new(NAME, rel < 1e-10, format!("relative mismatch {rel:.1e}"))
}

fn projection_fixed_points(cfg: &RunConfig) -> Check {
    const NAME: &str = "projection fixed points and monotonicity";
    let beta = cfg.continuation.beta_max;
    for n in [1, 2, 3, 8] {
        let proj = ProjectionConfig::new(beta, TargetSet::Levels(n));
        let (h0, h1) = (
            regularization::project_multilevel(0.0, &proj),
            regularization::project_multilevel(1.0, &proj),
        );
        if h0 != 0.0 || h1 != 1.0 {
            return Check::failed(NAME, format!("n={n}: H(0)={h0}, H(1)={h1}"));
        }
        let mut prev = h0;
        for k in 1..=1000 {
            let v = regularization::project_multilevel(k as f64 / 1000.0, &proj);
            if v < prev {
                return Check::failed(NAME, format!("n={n}: decreasing at {}", k as f64 / 1000.0));
            }
            prev = v;
        }
    }
    Check::new(NAME, true, format!("n in {{1, 2, 3, 8}} at beta={beta}"))
}

fn mesh_balance(cfg: &RunConfig) -> Check {
    const NAME: &str = "2:1 mesh balance after adaptation";
    let mut mesh = match AdaptiveMesh::build_initial(6, 3, (6.0, 3.0), 0) {
        Ok(m) => m,
        Err(e) => return Check::failed(NAME, e.to_string()),
    };
    for round in 0..4 {
        let field: Vec<f64> = (0..mesh.n_cells())
            .map(|c| {
                let [x, y] = mesh.cell_center(c);
                if y > 0.2 * x + 0.4 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        mesh = match mesh.plan_adaptation(&field, 1.0, cfg.adapt.c_r, cfg.adapt.c_c) {
            Ok(p) => p.mesh,
            Err(e) => return Check::failed(NAME, e.to_string()),
        };
        let v = mesh.balance_violations().len();
        if v > 0 {
            return Check::failed(NAME, format!("{v} violations after round {round}"));
        }
    }
    Check::new(NAME, true, format!("{} cells, finest level {}", mesh.n_cells(), mesh.finest_level()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let checks = run_suite(&RunConfig::default());
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn corrupted_c_p_fails_continuation() {
        let mut cfg = RunConfig::default();
        cfg.continuation.c_p = 0.9;
        let c = continuation_counts(&cfg);
        assert!(!c.passed);
        assert!(c.detail.contains("c_p"));
    }
}
