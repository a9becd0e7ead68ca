//! Necessary condition on initial states that the multilevel synthesis can steer to rest.
//!
//! Any control with values bounded by `σ̄` reaching zero at `T` satisfies
//! `‖x0‖ ≤ σ̄ ‖e^{-τA}B‖_{L²(0,T)}` by Cauchy–Schwarz in the variation of
//! constants formula.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::{self, LtiSystem};
use crate::numerics::simpson;
use crate::pwl::PwlConvex;

/// Default number of Simpson nodes for the Gram integral.
pub const DEFAULT_GRAM_NODES: usize = 4001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolvableBoundReport {
    /// Largest admissible control magnitude (`max |σ_k|`, times the scale if any).
    pub sigma_bar: f64,
    /// `‖e^{-τA}B‖` in `L²(0, T)`.
    pub gram_norm: f64,
    pub bound: f64,
    pub x0_norm: f64,
    pub passes: bool,
}

/// `sqrt(∫₀ᵀ ‖e^{-τA}B‖² dτ)` by composite Simpson on `nodes` uniform nodes.
pub fn gram_norm(a: &DMatrix<f64>, b: &DMatrix<f64>, horizon: f64, nodes: usize) -> Result<f64> {
    if nodes < 2 {
        return Err(Error::Domain("Gram quadrature needs at least two nodes".into()));
    }
    let h = horizon / (nodes - 1) as f64;
    let step = lti::mat_exp(a, -h)?;
    let mut current = b.clone();
    let mut values = Vec::with_capacity(nodes);
    for i in 0..nodes {
        if i > 0 {
            current = &step * current;
        }
        values.push(current.norm_squared());
    }
    Ok(simpson(&values, h).sqrt())
}

/// The bound for a single-channel system with levels taken from `pwl`'s slopes.
pub fn solvable_bound(sys: &LtiSystem, pwl: &PwlConvex) -> Result<SolvableBoundReport> {
    solvable_bound_scaled(sys, pwl, 1.0, DEFAULT_GRAM_NODES)
}

/// As [`solvable_bound`] with every level multiplied by `scale` (the Fabre
/// factor `Λ`), on a Gram grid of `nodes` points.
pub fn solvable_bound_scaled(
    sys: &LtiSystem,
    pwl: &PwlConvex,
    scale: f64,
    nodes: usize,
) -> Result<SolvableBoundReport> {
    if sys.channels() != 1 {
        return Err(Error::Unsupported(format!(
            "solvable-set bound is stated for one control channel, got {}",
            sys.channels()
        )));
    }
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::Domain(format!("level scale must be nonnegative, got {scale}")));
    }
    let sigma_bar = scale * pwl.slopes().iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let gram = gram_norm(sys.a(), sys.b(), sys.horizon(), nodes)?;
    let bound = sigma_bar * gram;
    let x0_norm = sys.x0().norm();
    Ok(SolvableBoundReport {
        sigma_bar,
        gram_norm: gram,
        bound,
        x0_norm,
        passes: x0_norm <= bound,
    })
}
