//! Sparse solver against an independent dense assembly on an 8x4 cantilever.

use mtopt_core::fem::{self, BvpSpec, DirichletRegion, ElasticSystem, Preset, TractionRegion};
use mtopt_core::mesh::{AdaptiveMesh, Side};
use nalgebra::{DMatrix, DVector, SMatrix};

fn bvp() -> BvpSpec<f64> {
    BvpSpec {
        preset: Preset::Custom,
        extents: (8.0, 4.0),
        base_grid: (8, 4),
        dirichlet: vec![DirichletRegion {
            side: Side::West,
            from: 0.0,
            to: 4.0,
            fix: [true, true],
        }],
        tractions: vec![TractionRegion {
            side: Side::East,
            from: 1.5,
            to: 2.5,
            traction: [0.0, -1.0],
        }],
        e0: 1.0,
        nu: 0.3,
    }
}

/// Unit-square plane-stress stiffness from 2x2 Gauss quadrature,
/// nodes counter-clockwise from the lower left.
fn dense_k0(nu: f64) -> SMatrix<f64, 8, 8> {
    let d = SMatrix::<f64, 3, 3>::new(1.0, nu, 0.0, nu, 1.0, 0.0, 0.0, 0.0, 0.5 * (1.0 - nu)) / (1.0 - nu * nu);
    let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
    let g = 1.0 / 3f64.sqrt();
    let mut k = SMatrix::<f64, 8, 8>::zeros();
    for &(xi, eta) in &[(-g, -g), (g, -g), (g, g), (-g, g)] {
        let mut b = SMatrix::<f64, 3, 8>::zeros();
        for (a, &(xa, ya)) in corners.iter().enumerate() {
            // element maps [-1,1]^2 onto the unit square: d/dx = 2 d/dxi
            let dx = 0.25 * xa * (1.0 + ya * eta) * 2.0;
            let dy = 0.25 * ya * (1.0 + xa * xi) * 2.0;
            b[(0, 2 * a)] = dx;
            b[(1, 2 * a + 1)] = dy;
            b[(2, 2 * a)] = dy;
            b[(2, 2 * a + 1)] = dx;
        }
        // Jacobian determinant 1/4, unit weights
        k += b.transpose() * d * b * 0.25;
    }
    k
}

#[test]
fn k0_matches_quadrature() {
    let ours = fem::element_stiffness(0.3_f64);
    let theirs = dense_k0(0.3);
    for i in 0..8 {
        for j in 0..8 {
            assert!((ours[i][j] - theirs[(i, j)]).abs() < 1e-14);
        }
    }
}

#[test]
fn sparse_matches_dense_solve() {
    let mesh = AdaptiveMesh::<f64>::build_initial(8, 4, (8.0, 4.0), 0).unwrap();
    let moduli: Vec<f64> = (0..mesh.n_cells()).map(|c| 0.1 + 0.9 * ((c * 37 % 17) as f64 / 16.0)).collect();
    let sys = ElasticSystem::new(&mesh, &bvp()).unwrap();
    let res = sys.solve(&mesh, &moduli).unwrap();

    // node numbering by lattice position
    let node = |x: f64, y: f64| (y.round() as usize) * 9 + x.round() as usize;
    let n = 9 * 5 * 2;
    let k0 = dense_k0(0.3);
    let mut k = DMatrix::<f64>::zeros(n, n);
    for c in 0..mesh.n_cells() {
        let [cx, cy] = mesh.cell_center(c);
        let (x0, y0) = (cx - 0.5, cy - 0.5);
        let ids = [node(x0, y0), node(x0 + 1.0, y0), node(x0 + 1.0, y0 + 1.0), node(x0, y0 + 1.0)];
        for a in 0..4 {
            for b in 0..4 {
                for da in 0..2 {
                    for db in 0..2 {
                        k[(2 * ids[a] + da, 2 * ids[b] + db)] += moduli[c] * k0[(2 * a + da, 2 * b + db)];
                    }
                }
            }
        }
    }
    let mut f = DVector::<f64>::zeros(n);
    // consistent nodal loads of a unit downward traction over y in [1.5, 2.5]
    f[2 * node(8.0, 1.0) + 1] = -0.125;
    f[2 * node(8.0, 2.0) + 1] = -0.75;
    f[2 * node(8.0, 3.0) + 1] = -0.125;
    let free: Vec<usize> = (0..n).filter(|&dof| (dof / 2) % 9 != 0).collect();
    let kf = DMatrix::from_fn(free.len(), free.len(), |i, j| k[(free[i], free[j])]);
    let ff = DVector::from_fn(free.len(), |i, _| f[free[i]]);
    let uf = kf.lu().solve(&ff).unwrap();
    let compliance = ff.dot(&uf);
    assert!((res.compliance - compliance).abs() < 1e-10 * compliance);

    let mut u = DVector::<f64>::zeros(n);
    for (i, &dof) in free.iter().enumerate() {
        u[dof] = uf[i];
    }
    for v in 0..mesh.n_vertices() {
        let [x, y] = mesh.vertex_coords(v);
        let id = node(x, y);
        for d in 0..2 {
            assert!((res.displacement[2 * v + d] - u[2 * id + d]).abs() < 1e-10 * u.amax());
        }
    }
}
