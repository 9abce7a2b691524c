//! Helmholtz density filter and multilevel smoothed Heaviside projection.
//!
//! The filter is discretized with nodal Q1 functions on the current mesh,
//! hanging vertices condensed as in the elastic problem. The mass matrix is
//! row-sum lumped after condensation, which keeps the system an M-matrix
//! (discrete maximum principle) while constants and total mass are still
//! reproduced exactly. Cell values are the mean of the four corner values.
//!
//! In operator form `F = S A⁻¹ Sᵀ W` with `S` the corner-averaging map and
//! `W` the cell areas, so the adjoint is `Fᵀ = W S A⁻¹ Sᵀ`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::fem::Condensation;
use crate::linalg::{self, CsrPattern, LdlFactor, LdlSymbolic, LinalgError, SymmetricMatrix};
use crate::material::TargetSet;
use crate::mesh::AdaptiveMesh;
use crate::scalar::Scalar;

/// Default filter radius.
pub const DEFAULT_RADIUS: f64 = 0.375;

/// Overshoot beyond `[0, 1]` tolerated before clamping.
const CLAMP_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig<T> {
    pub radius: T,
}

impl<T: Scalar> Default for FilterConfig<T> {
    fn default() -> Self {
        Self {
            radius: T::lit(DEFAULT_RADIUS),
        }
    }
}

impl<T: Scalar> FilterConfig<T> {
    /// Helmholtz length `r_f = r / (2√3)`.
    pub fn helmholtz_length(&self) -> T {
        self.radius / (T::lit(2.0) * T::lit(3.0).sqrt())
    }
}

/// Laplacian stiffness of a square Q1 element, corners CCW from
/// lower-left. Independent of the cell size.
fn laplace_stiffness<T: Scalar>() -> [[T; 4]; 4] {
    let s = T::one() / T::lit(6.0);
    let (d, a, o) = (T::lit(4.0) * s, -s, T::lit(-2.0) * s);
    [[d, a, o, a], [a, d, a, o], [o, a, d, a], [a, o, a, d]]
}

/// Factored filter operator for one mesh.
#[derive(Debug, Clone)]
pub struct FilterSystem<T> {
    cond: Condensation<T>,
    areas: Vec<T>,
    matrix: SymmetricMatrix<T>,
    factor: LdlFactor<T>,
}

impl<T: Scalar> FilterSystem<T> {
    pub fn new(mesh: &AdaptiveMesh<T>, cfg: &FilterConfig<T>) -> Result<Self, LinalgError> {
        let cond = Condensation::new(mesh);
        let n = cond.n_free();
        let rf = cfg.helmholtz_length();
        let rf2 = rf * rf;
        let kl = laplace_stiffness::<T>();
        let areas = mesh.cell_areas();

        let pattern = Arc::new(CsrPattern::from_entries(
            n,
            (0..mesh.n_cells()).flat_map(|c| {
                let cond = &cond;
                (0..4).flat_map(move |k| {
                    cond.corner(c, k).iter().flat_map(move |&(a, _)| {
                        (0..4).flat_map(move |l| cond.corner(c, l).iter().map(move |&(b, _)| (a, b)))
                    })
                })
            }),
        ));
        let mut matrix = SymmetricMatrix::zeros(pattern.clone());
        let quarter = T::lit(0.25);
        for c in 0..mesh.n_cells() {
            for k in 0..4 {
                for &(a, wa) in cond.corner(c, k) {
                    // lumped mass of the condensed space
                    matrix.add(a, a, wa * areas[c] * quarter);
                    if rf2 > T::zero() {
                        for l in 0..4 {
                            for &(b, wb) in cond.corner(c, l) {
                                matrix.add(a, b, rf2 * wa * kl[k][l] * wb);
                            }
                        }
                    }
                }
            }
        }
        let coords: Vec<[f64; 2]> = (0..n)
            .map(|f| {
                let [x, y] = mesh.vertex_coords(cond.free_vertex(f));
                [x.as_f64(), y.as_f64()]
            })
            .collect();
        let symbolic = Arc::new(LdlSymbolic::analyze_nd(&pattern, &coords));
        let factor = LdlFactor::factor(symbolic, &matrix)?;
        Ok(Self {
            cond,
            areas,
            matrix,
            factor,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.areas.len()
    }

    /// `Sᵀ v`: distributes cell values onto the free vertices.
    fn scatter(&self, cell_values: &[T]) -> Vec<T> {
        let mut rhs = vec![T::zero(); self.cond.n_free()];
        let quarter = T::lit(0.25);
        for (c, &v) in cell_values.iter().enumerate() {
            for k in 0..4 {
                for &(a, w) in self.cond.corner(c, k) {
                    rhs[a] += v * w * quarter;
                }
            }
        }
        rhs
    }

    /// `S x`: cell means of a nodal field.
    fn gather(&self, nodal: &[T]) -> Vec<T> {
        let quarter = T::lit(0.25);
        (0..self.n_cells())
            .map(|c| {
                let mut s = T::zero();
                for k in 0..4 {
                    for &(a, w) in self.cond.corner(c, k) {
                        s += w * nodal[a];
                    }
                }
                s * quarter
            })
            .collect()
    }

    fn solve(&self, rhs: &[T]) -> Vec<T> {
        linalg::solve_refined(&self.matrix, &self.factor, rhs, T::lit(1e-14)).0
    }

    /// Linear filter map without clamping.
    pub fn apply_linear(&self, design: &[T]) -> Vec<T> {
        assert_eq!(design.len(), self.n_cells(), "field length");
        let weighted: Vec<T> = design.iter().zip(&self.areas).map(|(&r, &a)| r * a).collect();
        let nodal = self.solve(&self.scatter(&weighted));
        self.gather(&nodal)
    }

    /// Filtered densities, clamped into `[0, 1]` only on real overshoot.
    pub fn apply(&self, design: &[T]) -> Vec<T> {
        let mut out = self.apply_linear(design);
        let slack = T::lit(CLAMP_SLACK);
        if out.iter().any(|&v| v < -slack || v > T::one() + slack) {
            out.iter_mut().for_each(|v| *v = v.max(T::zero()).min(T::one()));
        }
        out
    }

    /// Transpose of [`apply_linear`](Self::apply_linear).
    pub fn adjoint(&self, sensitivities: &[T]) -> Vec<T> {
        assert_eq!(sensitivities.len(), self.n_cells(), "field length");
        let nodal = self.solve(&self.scatter(sensitivities));
        self.gather(&nodal)
            .into_iter()
            .zip(&self.areas)
            .map(|(g, &a)| g * a)
            .collect()
    }
}

/// One-shot filter on a fresh system.
pub fn pde_filter<T: Scalar>(
    mesh: &AdaptiveMesh<T>,
    design: &[T],
    cfg: &FilterConfig<T>,
) -> Result<Vec<T>, LinalgError> {
    Ok(FilterSystem::new(mesh, cfg)?.apply(design))
}

/// One-shot adjoint filter on a fresh system.
pub fn filter_adjoint<T: Scalar>(
    mesh: &AdaptiveMesh<T>,
    sensitivities: &[T],
    cfg: &FilterConfig<T>,
) -> Result<Vec<T>, LinalgError> {
    Ok(FilterSystem::new(mesh, cfg)?.adjoint(sensitivities))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig<T> {
    pub beta: T,
    pub targets: TargetSet,
}

impl<T: Scalar> ProjectionConfig<T> {
    pub fn new(beta: T, targets: TargetSet) -> Self {
        Self { beta, targets }
    }

    /// `η_i = (i - 0.5)/n`, `i = 1..n`.
    pub fn thresholds(&self) -> Vec<T> {
        thresholds(self.targets)
    }
}

/// Projection thresholds halfway between consecutive targets.
pub fn thresholds<T: Scalar>(targets: TargetSet) -> Vec<T> {
    match targets.count() {
        Some(n) => (1..=n as usize)
            .map(|i| (T::from_count(i) - T::lit(0.5)) / T::from_count(n as usize))
            .collect(),
        None => Vec::new(),
    }
}

/// Single smoothed Heaviside step.
pub fn heaviside<T: Scalar>(rho: T, beta: T, eta: T) -> T {
    let a = (beta * eta).tanh();
    (a + (beta * (rho - eta)).tanh()) / (a + (beta * (T::one() - eta)).tanh())
}

/// Uses `sech² = exp(-2 ln cosh)` so the slope stays positive where
/// `1 - tanh²` would round to zero.
fn heaviside_derivative<T: Scalar>(rho: T, beta: T, eta: T) -> T {
    let den = (beta * eta).tanh() + (beta * (T::one() - eta)).tanh();
    beta * (T::lit(-2.0) * ln_cosh(beta * (rho - eta))).exp() / den
}

fn ln_cosh<T: Scalar>(x: T) -> T {
    let a = x.abs();
    a + (T::lit(-2.0) * a).exp().ln_1p() - T::LN_2()
}

/// Mean of `n` steps with `β_n = β·n` at the thresholds `η_i`; identity in
/// free mode.
pub fn project_multilevel<T: Scalar>(rho: T, cfg: &ProjectionConfig<T>) -> T {
    let Some(n) = cfg.targets.count() else {
        return rho;
    };
    let nf = T::from_count(n as usize);
    let beta_n = cfg.beta * nf;
    let sum: T = (1..=n as usize)
        .map(|i| heaviside(rho, beta_n, (T::from_count(i) - T::lit(0.5)) / nf))
        .sum();
    sum / nf
}

pub fn project_derivative<T: Scalar>(rho: T, cfg: &ProjectionConfig<T>) -> T {
    let Some(n) = cfg.targets.count() else {
        return T::one();
    };
    let nf = T::from_count(n as usize);
    let beta_n = cfg.beta * nf;
    let sum: T = (1..=n as usize)
        .map(|i| heaviside_derivative(rho, beta_n, (T::from_count(i) - T::lit(0.5)) / nf))
        .sum();
    sum / nf
}

/// Projected values and derivatives for a whole field.
pub fn project_field<T: Scalar>(filtered: &[T], cfg: &ProjectionConfig<T>) -> (Vec<T>, Vec<T>) {
    filtered
        .iter()
        .map(|&r| (project_multilevel(r, cfg), project_derivative(r, cfg)))
        .unzip()
}
