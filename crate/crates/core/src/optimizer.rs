//! Optimality-criteria update under a single volume constraint.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::AdaptiveMesh;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error(
        "volume target {vbar} unreachable: volume {vol_lo} at multiplier {lambda_lo:e}, {vol_hi} at {lambda_hi:e}"
    )]
    Unreachable {
        vbar: f64,
        lambda_lo: f64,
        lambda_hi: f64,
        vol_lo: f64,
        vol_hi: f64,
    },
    #[error("field lengths differ: design {design}, objective {objective}, constraint {constraint}")]
    Length {
        design: usize,
        objective: usize,
        constraint: usize,
    },
    #[error("constraint gradient must be positive, got {value} at cell {cell}")]
    ConstraintGradient { cell: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig<T> {
    pub move_limit: T,
    /// Move limit once the projection sharpens (β-ramp and fine-tune).
    pub sharp_move_limit: T,
    pub damping: T,
    pub lambda_min: T,
    pub lambda_max: T,
    pub lambda_rel_tol: T,
    /// Floor on the update ratio where the objective gradient vanishes.
    pub ratio_floor: T,
}

impl<T: Scalar> Default for OptimizerConfig<T> {
    fn default() -> Self {
        Self {
            move_limit: T::lit(0.2),
            sharp_move_limit: T::lit(0.02),
            damping: T::lit(0.5),
            lambda_min: T::lit(1e-9),
            lambda_max: T::lit(1e9),
            lambda_rel_tol: T::lit(1e-10),
            ratio_floor: T::lit(1e-10),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintEval<T> {
    /// `Σ ρ̄_e A_e / V₀ - V̄`.
    pub value: T,
    /// `A_e / V₀`.
    pub gradient: Vec<T>,
}

/// Area-weighted volume fraction constraint.
pub fn volume_fraction<T: Scalar>(mesh: &AdaptiveMesh<T>, physical: &[T], vbar: T) -> ConstraintEval<T> {
    let areas = mesh.cell_areas();
    let total: T = areas.iter().copied().sum();
    let gradient: Vec<T> = areas.iter().map(|&a| a / total).collect();
    let value = physical.iter().zip(&gradient).map(|(&r, &g)| r * g).sum::<T>() - vbar;
    ConstraintEval { value, gradient }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcOutcome<T> {
    pub design: Vec<T>,
    /// Multiplier in units of the objective/constraint gradient ratio.
    pub lambda: T,
    /// Volume fraction of the returned design.
    pub volume: T,
    /// False when the bound is slack even at the smallest multiplier.
    pub active: bool,
}

/// `ρ* = clamp(ρ·B^η)` inside the move limit and `[0, 1]`, with the
/// multiplier in `B = -g/(λ c)` found by bisection on `ln λ` so that
/// `volume(ρ*) = vbar`. `volume` maps a candidate design to its volume
/// fraction, typically through filter and projection.
pub fn oc_update<T, V>(
    design: &[T],
    obj_grad: &[T],
    con_grad: &[T],
    vbar: T,
    cfg: &OptimizerConfig<T>,
    mut volume: V,
) -> Result<OcOutcome<T>, OptimizerError>
where
    T: Scalar,
    V: FnMut(&[T]) -> T,
{
    let n = design.len();
    if obj_grad.len() != n || con_grad.len() != n {
        return Err(OptimizerError::Length {
            design: n,
            objective: obj_grad.len(),
            constraint: con_grad.len(),
        });
    }
    if let Some((cell, &value)) = con_grad.iter().enumerate().find(|(_, &c)| !(c > T::zero())) {
        return Err(OptimizerError::ConstraintGradient {
            cell,
            value: value.as_f64(),
        });
    }
    // ratios normalized by their mean so that λ is dimensionless
    let mut ratio: Vec<T> = obj_grad
        .iter()
        .zip(con_grad)
        .map(|(&g, &c)| (-g / c).max(T::zero()))
        .collect();
    let mean = ratio.iter().copied().sum::<T>() / T::from_count(n.max(1));
    let scale = if mean > T::zero() { mean } else { T::one() };
    ratio.iter_mut().for_each(|r| *r /= scale);

    let candidate = |lambda: T| -> Vec<T> {
        design
            .iter()
            .zip(&ratio)
            .map(|(&rho, &r)| {
                let b = (r / lambda).max(cfg.ratio_floor);
                let lo = (rho - cfg.move_limit).max(T::zero());
                let hi = (rho + cfg.move_limit).min(T::one());
                (rho * b.powf(cfg.damping)).max(lo).min(hi)
            })
            .collect()
    };

    let (mut lo, mut hi) = (cfg.lambda_min.ln(), cfg.lambda_max.ln());
    let at_lo = candidate(lo.exp());
    let vol_lo = volume(&at_lo);
    if vol_lo <= vbar {
        return Ok(OcOutcome {
            design: at_lo,
            lambda: lo.exp(),
            volume: vol_lo,
            active: false,
        });
    }
    let vol_hi = volume(&candidate(hi.exp()));
    if vol_hi > vbar {
        return Err(OptimizerError::Unreachable {
            vbar: vbar.as_f64(),
            lambda_lo: cfg.lambda_min.as_f64(),
            lambda_hi: cfg.lambda_max.as_f64(),
            vol_lo: vol_lo.as_f64(),
            vol_hi: vol_hi.as_f64(),
        });
    }
    let tol = cfg.lambda_rel_tol.ln_1p();
    while hi - lo > tol {
        let mid = (lo + hi) * T::lit(0.5);
        if volume(&candidate(mid.exp())) > vbar {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = ((lo + hi) * T::lit(0.5)).exp();
    let design = candidate(lambda);
    let vol = volume(&design);
    Ok(OcOutcome {
        design,
        lambda,
        volume: vol,
        active: true,
    })
}

/// Mean absolute change between two designs.
pub fn mean_change<T: Scalar>(old: &[T], new: &[T]) -> T {
    let n = old.len().max(1);
    old.iter().zip(new).map(|(&a, &b)| (a - b).abs()).sum::<T>() / T::from_count(n)
}
