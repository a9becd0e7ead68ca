//! Primal side of the duality: minimize `∫ℒ*(v)` subject to reaching zero.
//!
//! The primal control is piecewise linear in time between the quadrature
//! nodes, so the constraint map is assembled from exact first-order-hold
//! integrals and a feasible `v` drives the plant exactly to rest.
//! The objective uses the trapezoid weights of the quadrature.
//!
//! Sign convention: with `P(v) = Σ wᵢ ℒ*(vᵢ)` and the dual value `J(p_T)`,
//! weak duality reads `P(v) + J(p_T) ≥ 0` and strong duality makes the sum
//! vanish at the optimum. [`duality_gap`] returns that sum.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dual::{DualProblem, FunctionalKind};
use crate::error::{Error, Result};
use crate::lti::{self, HoldPropagator, PiecewiseLinear};
use crate::numerics::box_least_squares;
use crate::pwl::{PwlConvex, SubdiffInterval};

/// Discretized primal problem `min Σ wᵢ ℒ*(vᵢ)` s.t. `G v = c`.
#[derive(Debug, Clone)]
pub struct DiscretePrimal {
    times: Vec<f64>,
    weights: Vec<f64>,
    /// `N × (n·K)`; column `i·K + k` is the response to the hat function at node `i` on channel `k`.
    g: DMatrix<f64>,
    /// `-e^{TA}x0`.
    c: DVector<f64>,
    conjugates: Vec<PwlConvex>,
}

impl DiscretePrimal {
    /// Builds the primal of a `Jml` or `JmlBeta` problem on its quadrature nodes.
    pub fn new(prob: &DualProblem) -> Result<Self> {
        match prob.kind() {
            FunctionalKind::Jml | FunctionalKind::JmlBeta(_) => {}
            other => {
                return Err(Error::Unsupported(format!(
                    "primal problem for kind {}",
                    other.label()
                )))
            }
        }
        let sys = prob.system();
        let times = prob.quadrature().times().to_vec();
        let weights = prob.quadrature().weights().to_vec();
        let n = sys.state_dim();
        let k = sys.channels();
        let nodes = times.len();
        let mut g = DMatrix::<f64>::zeros(n, nodes * k);
        let mut holds: HashMap<u64, HoldPropagator> = HashMap::new();
        // `to_end` is e^{(T - t_{i+1})A} while processing cell i.
        let mut to_end = DMatrix::<f64>::identity(n, n);
        let end_gap = sys.horizon() - times[nodes - 1];
        if end_gap > 0.0 {
            to_end = lti::mat_exp(sys.a(), end_gap)?;
        }
        for i in (0..nodes - 1).rev() {
            let h = times[i + 1] - times[i];
            let key = h.to_bits() >> 12;
            if let Entry::Vacant(slot) = holds.entry(key) {
                slot.insert(HoldPropagator::new(sys.a(), sys.b(), h)?);
            }
            let hold = &holds[&key];
            let ramp = &hold.first_order / h;
            let left = &to_end * (&hold.zero_order - &ramp);
            let right = &to_end * ramp;
            for ch in 0..k {
                let mut col = g.column_mut(i * k + ch);
                col += left.column(ch);
                let mut col = g.column_mut((i + 1) * k + ch);
                col += right.column(ch);
            }
            to_end = &to_end * &hold.flow;
        }
        let c = -prob.free_terminal_state();
        let conjugates = prob
            .penalizations()
            .iter()
            .map(PwlConvex::conjugate)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            times,
            weights,
            g,
            c,
            conjugates,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn constraint_map(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn conjugates(&self) -> &[PwlConvex] {
        &self.conjugates
    }

    pub fn channels(&self) -> usize {
        self.conjugates.len()
    }

    /// `Σ wᵢ ℒ*_k(v_{i,k})`, `+∞` outside the domain.
    pub fn objective(&self, v: &DVector<f64>) -> f64 {
        let k = self.channels();
        let mut total = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            for (ch, lc) in self.conjugates.iter().enumerate() {
                total += w * lc.value(v[i * k + ch]);
            }
        }
        total
    }

    /// `‖G v - c‖`.
    pub fn residual(&self, v: &DVector<f64>) -> f64 {
        (&self.g * v - &self.c).norm()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let k = self.channels();
        let mut lower = Vec::with_capacity(self.times.len() * k);
        let mut upper = Vec::with_capacity(self.times.len() * k);
        for _ in 0..self.times.len() {
            for lc in &self.conjugates {
                let (lo, hi) = lc.domain();
                lower.push(lo);
                upper.push(hi);
            }
        }
        (lower, upper)
    }
}

/// Iteration controls for [`solve_primal`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrimalSettings {
    pub max_iterations: usize,
    /// Relative tolerance on the primal-dual gap estimate and on feasibility.
    pub tolerance: f64,
    /// Final feasibility demanded after polishing, relative to `1 + ‖c‖`.
    pub feasibility: f64,
}

impl Default for PrimalSettings {
    fn default() -> Self {
        Self {
            max_iterations: 20_000,
            tolerance: 1e-9,
            feasibility: 1e-8,
        }
    }
}

/// Result of [`solve_primal`].
#[derive(Debug, Clone)]
pub struct PrimalSolution {
    /// Node values, `values[i][k]` at node `i` on channel `k`.
    pub values: Vec<DVector<f64>>,
    pub objective: f64,
    pub residual: f64,
    pub iterations: usize,
    /// Multiplier of the terminal constraint, an estimate of `p_T`.
    pub multiplier: DVector<f64>,
}

impl PrimalSolution {
    /// The node-interpolated control.
    pub fn control(&self, times: &[f64]) -> Result<PiecewiseLinear> {
        PiecewiseLinear::new(times.to_vec(), self.values.clone())
    }
}

/// Solves the discrete primal by diagonally preconditioned primal-dual
/// splitting (Chambolle–Pock) followed by a feasibility polish.
pub fn solve_primal(dp: &DiscretePrimal, settings: &PrimalSettings) -> Result<PrimalSolution> {
    let g = &dp.g;
    let c = &dp.c;
    let (rows, cols) = g.shape();
    let k = dp.channels();
    let c_scale = 1.0 + c.norm();
    let (lower, upper) = dp.bounds();

    let reach = box_least_squares(
        g,
        &(-c),
        &lower,
        &upper,
        &DVector::zeros(cols),
        settings.feasibility * c_scale,
        settings.max_iterations,
    );
    if reach.residual > 1e-4 * c_scale {
        return Err(Error::Infeasible(format!(
            "no admissible control reaches zero: best terminal residual {:.3e}; \
             the solvable-set bound gives a necessary condition on x0",
            reach.residual
        )));
    }

    let mut tau = vec![0.0; cols];
    for (j, t) in tau.iter_mut().enumerate() {
        let s: f64 = g.column(j).iter().map(|x| x.abs()).sum();
        *t = if s > 0.0 { 1.0 / s } else { 1.0 };
    }
    let mut sigma = DVector::<f64>::zeros(rows);
    for r in 0..rows {
        let s: f64 = g.row(r).iter().map(|x| x.abs()).sum();
        sigma[r] = if s > 0.0 { 1.0 / s } else { 1.0 };
    }

    let mut v = DVector::<f64>::zeros(cols);
    let mut v_bar = v.clone();
    let mut y = DVector::<f64>::zeros(rows);
    let mut iterations = 0;
    while iterations < settings.max_iterations {
        iterations += 1;
        let r = g * &v_bar - c;
        y += r.component_mul(&sigma);
        let gty = g.tr_mul(&y);
        let prev = v.clone();
        for i in 0..dp.times.len() {
            for (ch, lc) in dp.conjugates.iter().enumerate() {
                let j = i * k + ch;
                v[j] = lc.prox(v[j] - tau[j] * gty[j], tau[j] * dp.weights[i]);
            }
        }
        v_bar = &v * 2.0 - &prev;
        if iterations % 50 == 0 {
            let residual = dp.residual(&v);
            let primal = dp.objective(&v);
            let dual = lagrangian_dual(dp, &y);
            let gap = (primal - dual).abs();
            if residual <= settings.tolerance * c_scale && gap <= settings.tolerance * (1.0 + primal.abs()) {
                break;
            }
        }
    }
    log::debug!("primal splitting stopped after {iterations} iterations");

    polish(dp, &mut v, &lower, &upper, settings.feasibility * c_scale);
    let residual = dp.residual(&v);
    if residual > settings.feasibility * c_scale {
        return Err(Error::Numerical(format!(
            "primal feasibility {residual:.3e} above {:.3e}",
            settings.feasibility * c_scale
        )));
    }
    let values = (0..dp.times.len())
        .map(|i| DVector::from_iterator(k, (0..k).map(|ch| v[i * k + ch])))
        .collect();
    Ok(PrimalSolution {
        values,
        objective: dp.objective(&v),
        residual,
        iterations,
        multiplier: -y,
    })
}

/// Dual function of the Lagrangian `P(v) + ⟨y, Gv - c⟩`:
/// `-⟨y, c⟩ - Σ wᵢ ℒ(-(Gᵀy)ᵢ / wᵢ)`.
fn lagrangian_dual(dp: &DiscretePrimal, y: &DVector<f64>) -> f64 {
    let k = dp.channels();
    let gty = dp.g.tr_mul(y);
    let mut total = -y.dot(&dp.c);
    for (i, &w) in dp.weights.iter().enumerate() {
        for (ch, lc) in dp.conjugates.iter().enumerate() {
            // ℒ = (ℒ*)*, evaluated through the max over the vertices of ℒ*.
            let s = -gty[i * k + ch] / w;
            total -= w * conjugate_value(lc, s);
        }
    }
    total
}

fn conjugate_value(lc: &PwlConvex, s: f64) -> f64 {
    let (lo, hi) = lc.domain();
    let mut best = f64::NEG_INFINITY;
    for &(x, fx) in lc.nodes() {
        best = best.max(x * s - fx);
    }
    for end in [lo, hi] {
        if end.is_finite() {
            best = best.max(end * s - lc.value(end));
        }
    }
    best
}

/// Restores `G v = c` by alternating the minimum-norm correction with
/// clipping to the box.
fn polish(dp: &DiscretePrimal, v: &mut DVector<f64>, lower: &[f64], upper: &[f64], target: f64) {
    let g = &dp.g;
    let gram = g * g.transpose();
    let Some(chol) = gram.cholesky() else {
        return;
    };
    for _ in 0..200 {
        let r = &dp.c - g * &*v;
        if r.norm() <= 0.1 * target {
            return;
        }
        let step = g.tr_mul(&chol.solve(&r));
        *v += step;
        for j in 0..v.len() {
            v[j] = v[j].clamp(lower[j], upper[j]);
        }
    }
}

/// Both addends of the duality gap and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualityGap {
    pub primal: f64,
    pub dual: f64,
    /// `primal + dual`; nonnegative up to discretization, zero under strong duality.
    pub gap: f64,
}

/// `P(v) + J(p_T)` for a primal solution and a dual datum on the same grid.
pub fn duality_gap(primal: &PrimalSolution, p_star: &DVector<f64>, prob: &DualProblem) -> Result<DualityGap> {
    if primal.values.len() != prob.quadrature().len() {
        return Err(Error::Dimension(format!(
            "primal has {} nodes, dual quadrature {}",
            primal.values.len(),
            prob.quadrature().len()
        )));
    }
    let dp_obj = primal_objective(&primal.values, prob)?;
    let dual = prob.evaluate(p_star)?.value;
    Ok(DualityGap {
        primal: dp_obj,
        dual,
        gap: dp_obj + dual,
    })
}

fn primal_objective(values: &[DVector<f64>], prob: &DualProblem) -> Result<f64> {
    let conj = prob
        .penalizations()
        .iter()
        .map(PwlConvex::conjugate)
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for (v, w) in values.iter().zip(prob.quadrature().weights()) {
        for (ch, lc) in conj.iter().enumerate() {
            total += w * lc.value(v[ch]);
        }
    }
    Ok(total)
}

/// Fraction of (node, channel) pairs where `Bᵀp(tᵢ) ∈ ∂ℒ*(vᵢ)` within `slack`.
///
/// Membership is measured against the graph of `∂ℒ*`: the pair passes when
/// some `v'` with `|v' - vᵢ| ≤ slack` has a subgradient within `slack` of
/// `Bᵀp(tᵢ)`. Over `[a, b]` the subgradients of a convex function of one
/// variable fill `[f'₋(a), f'₊(b)]`.
pub fn nodewise_optimality(
    primal: &PrimalSolution,
    p_star: &DVector<f64>,
    prob: &DualProblem,
    slack: f64,
) -> Result<f64> {
    let q = prob.adjoint_outputs(p_star)?;
    if q.len() != primal.values.len() {
        return Err(Error::Dimension("primal and dual grids differ".into()));
    }
    let conj = prob
        .penalizations()
        .iter()
        .map(PwlConvex::conjugate)
        .collect::<Result<Vec<_>>>()?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (qi, vi) in q.iter().zip(&primal.values) {
        for (ch, lc) in conj.iter().enumerate() {
            total += 1;
            let v = vi[ch];
            let (lo, hi) = lc.domain();
            let a = (v - slack).clamp(lo, hi);
            let b = (v + slack).clamp(lo, hi);
            if let (Some(left), Some(right)) = (lc.subdifferential(a), lc.subdifferential(b)) {
                let hull = SubdiffInterval {
                    lower: left.lower,
                    upper: right.upper,
                };
                if hull.contains(qi[ch], slack) {
                    hits += 1;
                }
            }
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Discrete `L²(0,T)` distance between two controls sampled at the quadrature nodes.
pub fn l2_distance(
    prob: &DualProblem,
    a: &dyn Fn(f64) -> DVector<f64>,
    b: &dyn Fn(f64) -> DVector<f64>,
) -> f64 {
    let q = prob.quadrature();
    q.times()
        .iter()
        .zip(q.weights())
        .map(|(&t, w)| w * (a(t) - b(t)).norm_squared())
        .sum::<f64>()
        .sqrt()
}
