//! Multilevel SIMP interpolation.
//!
//! Between consecutive target densities `ρ̂_i = i/n` the usual power law is
//! applied to the local density `(ρ - ρ̂_i)/Δρ̂`, so penalization pushes
//! intermediate values towards the nearest targets instead of only 0 and 1.
//! The modulus floor `ρ_min` is blended in globally, as in modified SIMP.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Stiffness floor of void material, relative to `E0`.
pub const RHO_MIN: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaterialError {
    #[error("density {0} outside [0, 1]")]
    DensityOutOfRange(f64),
    #[error("number of target thicknesses must be at least 1")]
    NoTargets,
    #[error("cannot parse target set {0:?}: expected a positive integer or \"free\"")]
    Parse(String),
}

/// Allowed thickness levels: `n` equally spaced targets, or unrestricted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum TargetSet {
    Levels(u32),
    Free,
}

impl TargetSet {
    pub fn levels(n: u32) -> Result<Self, MaterialError> {
        if n == 0 {
            return Err(MaterialError::NoTargets);
        }
        Ok(TargetSet::Levels(n))
    }

    pub fn is_free(&self) -> bool {
        matches!(self, TargetSet::Free)
    }

    /// Number of non-void targets, `None` for the free set.
    pub fn count(&self) -> Option<u32> {
        match *self {
            TargetSet::Levels(n) => Some(n),
            TargetSet::Free => None,
        }
    }

    /// Target spacing `Δρ̂ = 1/n`; the free set uses 1.
    pub fn spacing<T: Scalar>(&self) -> T {
        match *self {
            TargetSet::Levels(n) => T::one() / T::from_count(n as usize),
            TargetSet::Free => T::one(),
        }
    }

    /// `ρ̂_0 = 0, …, ρ̂_n = 1`; empty for the free set.
    pub fn targets<T: Scalar>(&self) -> Vec<T> {
        match *self {
            TargetSet::Levels(n) => (0..=n)
                .map(|i| T::from_count(i as usize) / T::from_count(n as usize))
                .collect(),
            TargetSet::Free => Vec::new(),
        }
    }

    /// Physical thicknesses `t_i = i·t_n/n` for a given total thickness.
    pub fn thicknesses<T: Scalar>(&self, total: T) -> Vec<T> {
        self.targets::<T>().into_iter().map(|r| r * total).collect()
    }

    /// Distance from `rho` to the closest target (0 for the free set).
    pub fn distance_to_nearest<T: Scalar>(&self, rho: T) -> T {
        match *self {
            TargetSet::Levels(n) => {
                let nf = T::from_count(n as usize);
                let scaled = rho * nf;
                (scaled - scaled.round()).abs() / nf
            }
            TargetSet::Free => T::zero(),
        }
    }
}

impl fmt::Display for TargetSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetSet::Levels(n) => write!(f, "{n}"),
            TargetSet::Free => f.write_str("free"),
        }
    }
}

impl FromStr for TargetSet {
    type Err = MaterialError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("free") {
            return Ok(TargetSet::Free);
        }
        s.parse::<u32>()
            .map_err(|_| MaterialError::Parse(s.to_string()))
            .and_then(TargetSet::levels)
    }
}

impl From<TargetSet> for String {
    fn from(t: TargetSet) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for TargetSet {
    type Error = MaterialError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Index `i` of the interval `[ρ̂_i, ρ̂_{i+1})` holding `rho`; the last
/// interval is closed so `rho = 1` maps to `n - 1`.
pub fn interval_index<T: Scalar>(rho: T, n: u32) -> Result<usize, MaterialError> {
    if !(rho >= T::zero() && rho <= T::one()) {
        return Err(MaterialError::DensityOutOfRange(rho.as_f64()));
    }
    if n == 0 {
        return Err(MaterialError::NoTargets);
    }
    Ok(interval_unchecked(rho, n))
}

fn interval_unchecked<T: Scalar>(rho: T, n: u32) -> usize {
    let last = n as usize - 1;
    let nf = T::from_count(n as usize);
    let mut i = (rho * nf).floor().to_usize().unwrap_or(0).min(last);
    // guard against rounding in rho * n near the targets
    let target = |k: usize| T::from_count(k) / nf;
    if i > 0 && rho < target(i) {
        i -= 1;
    } else if i < last && rho >= target(i + 1) {
        i += 1;
    }
    i
}

/// Local coordinate of `rho` inside its interval together with the
/// interval's lower target and spacing.
fn local_density<T: Scalar>(rho: T, n: u32) -> (T, T, T) {
    let spacing = T::one() / T::from_count(n as usize);
    let i = interval_unchecked(rho, n);
    let lower = T::from_count(i) / T::from_count(n as usize);
    let local = ((rho - lower) / spacing).max(T::zero()).min(T::one());
    (local, lower, spacing)
}

/// Effective Young's modulus of a cell with physical density `rho`.
pub fn effective_modulus<T: Scalar>(rho: T, p: T, targets: TargetSet, e0: T) -> T {
    let rho = rho.max(T::zero()).min(T::one());
    let rho_min = T::lit(RHO_MIN);
    let interpolated = match targets {
        TargetSet::Free => rho,
        TargetSet::Levels(n) => {
            let (local, lower, spacing) = local_density(rho, n);
            local.powf(p) * spacing + lower
        }
    };
    ((T::one() - rho_min) * interpolated + rho_min) * e0
}

/// One-sided derivative `dE/dρ` on the active interval. At an exact target
/// the upper interval is active, where the local density is zero.
pub fn modulus_derivative<T: Scalar>(rho: T, p: T, targets: TargetSet, e0: T) -> T {
    let rho = rho.max(T::zero()).min(T::one());
    let scale = (T::one() - T::lit(RHO_MIN)) * e0;
    match targets {
        TargetSet::Free => scale,
        TargetSet::Levels(n) => {
            let (local, _, _) = local_density(rho, n);
            let d = if p == T::one() {
                T::one()
            } else if local == T::zero() {
                if p < T::one() {
                    T::infinity()
                } else {
                    T::zero()
                }
            } else {
                p * local.powf(p - T::one())
            };
            scale * d
        }
    }
}

/// Penalization exponent and modulus floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenalizationState<T> {
    pub p: T,
    pub rho_min: T,
}

impl<T: Scalar> Default for PenalizationState<T> {
    fn default() -> Self {
        Self {
            p: T::one(),
            rho_min: T::lit(RHO_MIN),
        }
    }
}

/// Cell-wise moduli and derivatives for a whole field.
pub fn modulus_field<T: Scalar>(physical: &[T], p: T, targets: TargetSet, e0: T) -> (Vec<T>, Vec<T>) {
    let p = if targets.is_free() { T::one() } else { p };
    physical
        .iter()
        .map(|&r| {
            (
                effective_modulus(r, p, targets, e0),
                modulus_derivative(r, p, targets, e0),
            )
        })
        .unzip()
}
