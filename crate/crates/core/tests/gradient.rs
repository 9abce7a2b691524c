//! Full-chain sensitivities against central finite differences.

use mtopt_core::driver::{CaseConfig, CaseOperators};
use mtopt_core::fem::{BvpSpec, DirichletRegion, Preset, TractionRegion};
use mtopt_core::mesh::{AdaptiveMesh, Side};
use mtopt_core::regularization::ProjectionConfig;
use mtopt_core::TargetSet;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn small_cantilever() -> BvpSpec<f64> {
    BvpSpec {
        preset: Preset::Custom,
        extents: (4.0, 2.0),
        base_grid: (4, 2),
        dirichlet: vec![DirichletRegion { side: Side::West, from: 0.0, to: 2.0, fix: [true, true] }],
        tractions: vec![TractionRegion { side: Side::East, from: 0.9, to: 1.1, traction: [0.0, -5.0] }],
        e0: 1.0,
        nu: 0.3,
    }
}

/// Random design plus the cells whose physical density sits `margin` away from every target.
fn design_away_from_targets(
    ops: &CaseOperators<f64>,
    n: usize,
    proj: &ProjectionConfig<f64>,
    margin: f64,
    rng: &mut StdRng,
) -> (Vec<f64>, Vec<usize>) {
    loop {
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let (phys, _) = ops.physical(&d, proj);
        let ok: Vec<usize> = (0..n)
            .filter(|&c| proj.targets.is_free() || proj.targets.distance_to_nearest(phys[c]) >= margin)
            .collect();
        if ok.len() >= 20 {
            return (d, ok);
        }
    }
}

fn check(targets: TargetSet, p: f64, beta: f64, seed: u64) -> f64 {
    let bvp = small_cantilever();
    let mesh = AdaptiveMesh::build_initial(4, 2, (4.0, 2.0), 1).unwrap();
    let cfg = CaseConfig::new(bvp, 0.4, targets);
    let ops = CaseOperators::new(&mesh, &cfg).unwrap();
    let proj = ProjectionConfig::new(beta, targets);
    let mut rng = StdRng::seed_from_u64(seed);
    let (design, mut cells) = design_away_from_targets(&ops, mesh.n_cells(), &proj, 0.02, &mut rng);
    let eval = ops.evaluate(&mesh, &design, targets, p, beta, 1.0).unwrap();
    let compliance = |d: &[f64]| ops.evaluate(&mesh, d, targets, p, beta, 1.0).unwrap().compliance;
    for i in 0..20 {
        let j = rng.gen_range(i..cells.len());
        cells.swap(i, j);
    }
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for &c in &cells[..20] {
        let mut up = design.clone();
        let mut dn = design.clone();
        up[c] += h;
        dn[c] -= h;
        let fd = (compliance(&up) - compliance(&dn)) / (2.0 * h);
        let rel = (eval.compliance_gradient[c] - fd).abs() / fd.abs();
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn full_chain_gradient_single_level() {
    let worst = check(TargetSet::Levels(1), 3.0, 2.0, 1);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn full_chain_gradient_three_levels() {
    let worst = check(TargetSet::Levels(3), 3.0, 4.0, 2);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn full_chain_gradient_free() {
    let worst = check(TargetSet::Free, 1.0, 1.0, 3);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn volume_gradient_matches_fd() {
    let targets = TargetSet::Levels(2);
    let mesh = AdaptiveMesh::build_initial(4, 2, (4.0, 2.0), 1).unwrap();
    let cfg = CaseConfig::new(small_cantilever(), 0.4, targets);
    let ops = CaseOperators::new(&mesh, &cfg).unwrap();
    let proj = ProjectionConfig::new(3.0, targets);
    let mut rng = StdRng::seed_from_u64(9);
    let (design, _) = design_away_from_targets(&ops, mesh.n_cells(), &proj, 0.02, &mut rng);
    let eval = ops.evaluate(&mesh, &design, targets, 3.0, 3.0, 1.0).unwrap();
    let h = 1e-6;
    for c in 0..mesh.n_cells() {
        let mut up = design.clone();
        let mut dn = design.clone();
        up[c] += h;
        dn[c] -= h;
        let fd = (ops.volume(&ops.physical(&up, &proj).0) - ops.volume(&ops.physical(&dn, &proj).0)) / (2.0 * h);
        assert!((eval.volume_gradient[c] - fd).abs() < 1e-6 * fd.abs().max(1e-3));
    }
}
