//! Dual functionals over the adjoint datum `p_T` and their minimization.
//!
//! With `q(t) = Bᵀp(t) = Φ(t)ᵀ p_T`, `Φ(t) = e^{(T-t)A}B`, every functional has
//! the form `F(I(p_T)) + ⟨e^{TA}x0, p_T⟩` where `I` integrates a penalization of
//! `q`. The gradient of such a functional is the terminal state reached under
//! the control `F'(I)·ℒ'(q(t))`, which is why stationarity and null
//! controllability coincide.
//!
//! Integrals are computed cell by cell with `q` interpolated linearly between
//! quadrature nodes. On each cell the interpolated `q` is split where it crosses
//! a breakpoint, so the discrete functional is exactly the integral of a
//! piecewise-linear penalization along a piecewise-linear path. That makes it
//! continuously differentiable except where `q` sits on a breakpoint for a
//! whole cell.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::{self, LtiSystem, PiecewiseConstant, PiecewiseLinear};
use crate::numerics::box_least_squares;
use crate::pwl::PwlConvex;

/// Which dual functional to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "beta", rename_all = "kebab-case")]
pub enum FunctionalKind {
    /// `∫ℒ(Bᵀp) + ⟨x0, p(0)⟩`.
    Jml,
    /// `½(∫ℒ(Bᵀp))² + ⟨x0, p(0)⟩`.
    JmlFabre,
    /// `β∫ℒ(Bᵀp) + ⟨x0, p(0)⟩` with `β > 1`.
    JmlBeta(f64),
    /// `∫|Bᵀp|² + ⟨x0, p(0)⟩`.
    J2,
    /// `½(∫|Bᵀp|²)² + ⟨x0, p(0)⟩`.
    J2Fabre,
}

impl FunctionalKind {
    pub fn is_fabre(self) -> bool {
        matches!(self, Self::JmlFabre | Self::J2Fabre)
    }

    pub fn is_quadratic(self) -> bool {
        matches!(self, Self::J2 | Self::J2Fabre)
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Jml => "jml",
            Self::JmlFabre => "jml-fabre",
            Self::JmlBeta(_) => "jml-beta",
            Self::J2 => "j2",
            Self::J2Fabre => "j2-fabre",
        }
    }
}

/// Quadrature nodes on `[0, T]` with trapezoid weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadrature {
    times: Vec<f64>,
    weights: Vec<f64>,
}

impl Quadrature {
    pub fn uniform(horizon: f64, nodes: usize) -> Result<Self> {
        if nodes < 2 {
            return Err(Error::Domain(format!("quadrature needs >= 2 nodes, got {nodes}")));
        }
        Self::from_times(lti::uniform_grid(horizon, nodes))
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times.windows(2).any(|w| !(w[1] > w[0])) || times[0] != 0.0 {
            return Err(Error::Domain(
                "quadrature times must start at 0 and increase strictly".into(),
            ));
        }
        let n = times.len();
        let mut weights = vec![0.0; n];
        for i in 0..n - 1 {
            let half = 0.5 * (times[i + 1] - times[i]);
            weights[i] += half;
            weights[i + 1] += half;
        }
        Ok(Self { times, weights })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Step-length rule of the descent method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum StepRule {
    /// Barzilai–Borwein trial step with backtracking.
    BarzilaiBorwein,
    /// `(J - lower_bound) / ‖g‖²`.
    Polyak { lower_bound: f64 },
    /// `scale / (√(k+1)·‖g‖)`.
    Diminishing { scale: f64 },
}

/// Initial iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "start", rename_all = "kebab-case")]
pub enum StartPoint {
    Zero,
    /// Uniform in `[-radius, radius]ᴺ`, reproducible from `seed`.
    Random { seed: u64, radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub step_rule: StepRule,
    pub max_iterations: usize,
    /// Stationarity tolerance on the (interval) subgradient norm.
    pub tolerance: f64,
    pub divergence_threshold: f64,
    /// Accepted steps with strictly decreasing best value required to declare divergence.
    pub divergence_window: usize,
    /// Iterations without relative best-value progress before stopping.
    pub stall_window: usize,
    pub stall_tolerance: f64,
    pub start: StartPoint,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            step_rule: StepRule::BarzilaiBorwein,
            max_iterations: 50_000,
            tolerance: 1e-6,
            divergence_threshold: 1e6,
            divergence_window: 100,
            stall_window: 200,
            stall_tolerance: 1e-12,
            start: StartPoint::Zero,
        }
    }
}

/// A dual functional instance: plant, per-channel penalizations, kind, quadrature.
#[derive(Debug, Clone)]
pub struct DualProblem {
    sys: LtiSystem,
    base: Vec<PwlConvex>,
    effective: Vec<PwlConvex>,
    kind: FunctionalKind,
    quadrature: Quadrature,
    optimizer: OptimizerSettings,
    kernel: Vec<DMatrix<f64>>,
    free: DVector<f64>,
}

/// Value and gradient of a functional at one point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    /// The penalization integral `I(p_T)`.
    pub integral: f64,
    pub gradient: DVector<f64>,
}

impl DualProblem {
    pub fn new(
        sys: LtiSystem,
        penalizations: Vec<PwlConvex>,
        kind: FunctionalKind,
        quadrature: Quadrature,
        optimizer: OptimizerSettings,
    ) -> Result<Self> {
        if penalizations.len() != sys.channels() {
            return Err(Error::Dimension(format!(
                "{} penalizations for {} control channels",
                penalizations.len(),
                sys.channels()
            )));
        }
        if let Some(l) = penalizations
            .iter()
            .find(|l| l.domain() != (f64::NEG_INFINITY, f64::INFINITY))
        {
            return Err(Error::Domain(format!(
                "penalizations must be finite on ℝ, got domain {:?}",
                l.domain()
            )));
        }
        let beta = match kind {
            FunctionalKind::JmlBeta(beta) if !(beta.is_finite() && beta > 1.0) => {
                return Err(Error::Domain(format!("β must exceed 1, got {beta}")));
            }
            FunctionalKind::JmlBeta(beta) => Some(beta),
            _ => None,
        };
        let total: f64 = quadrature.weights().iter().sum();
        if (quadrature.horizon() - sys.horizon()).abs() > 1e-12 * sys.horizon()
            || (total - sys.horizon()).abs() > 1e-10
        {
            return Err(Error::Domain(format!(
                "quadrature covers [0, {}] with weight {total}, horizon is {}",
                quadrature.horizon(),
                sys.horizon()
            )));
        }
        if !(optimizer.tolerance > 0.0 && optimizer.divergence_threshold > 0.0) {
            return Err(Error::Domain("optimizer tolerances must be positive".into()));
        }
        let rank = lti::kalman_rank(sys.a(), sys.b())?;
        if rank < sys.state_dim() {
            log::warn!(
                "Kalman rank {rank} < {}: the system is not controllable",
                sys.state_dim()
            );
        }
        let effective = match beta {
            Some(beta) => penalizations
                .iter()
                .map(|l| l.scaled(beta))
                .collect::<Result<Vec<_>>>()?,
            None => penalizations.clone(),
        };
        let kernel = lti::input_kernel(&sys, quadrature.times())?;
        let free = sys.free_terminal_state();
        Ok(Self {
            sys,
            base: penalizations,
            effective,
            kind,
            quadrature,
            optimizer,
            kernel,
            free,
        })
    }

    pub fn system(&self) -> &LtiSystem {
        &self.sys
    }

    pub fn kind(&self) -> FunctionalKind {
        self.kind
    }

    pub fn quadrature(&self) -> &Quadrature {
        &self.quadrature
    }

    pub fn optimizer(&self) -> &OptimizerSettings {
        &self.optimizer
    }

    /// Penalizations as supplied.
    pub fn base_penalizations(&self) -> &[PwlConvex] {
        &self.base
    }

    /// Penalizations entering the functional (scaled by `β` for `JmlBeta`).
    pub fn penalizations(&self) -> &[PwlConvex] {
        &self.effective
    }

    /// `e^{(T-t_i)A}B` at every quadrature node.
    pub fn kernel(&self) -> &[DMatrix<f64>] {
        &self.kernel
    }

    /// `e^{TA}x0`.
    pub fn free_terminal_state(&self) -> &DVector<f64> {
        &self.free
    }

    pub fn with_kind(&self, kind: FunctionalKind) -> Result<Self> {
        Self::new(
            self.sys.clone(),
            self.base.clone(),
            kind,
            self.quadrature.clone(),
            self.optimizer,
        )
    }

    pub fn with_optimizer(&self, optimizer: OptimizerSettings) -> Self {
        Self {
            optimizer,
            ..self.clone()
        }
    }

    fn check_dim(&self, p: &DVector<f64>) -> Result<()> {
        if p.len() != self.sys.state_dim() {
            return Err(Error::Dimension(format!(
                "adjoint datum has length {}, expected {}",
                p.len(),
                self.sys.state_dim()
            )));
        }
        Ok(())
    }

    /// `q_i = Bᵀp(t_i)` at every node.
    pub fn adjoint_outputs(&self, p: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        self.check_dim(p)?;
        Ok(self.kernel.iter().map(|phi| phi.tr_mul(p)).collect())
    }

    /// Functional value, penalization integral and gradient at `p`.
    pub fn evaluate(&self, p: &DVector<f64>) -> Result<Evaluation> {
        let q = self.adjoint_outputs(p)?;
        let n = q.len();
        let channels = self.sys.channels();
        let times = self.quadrature.times();
        let mut node_weights = vec![DVector::<f64>::zeros(channels); n];
        let mut integral = 0.0;
        if self.kind.is_quadratic() {
            // Smooth integrand: plain trapezoid on the nodes.
            for k in 0..channels {
                for (i, w) in self.quadrature.weights().iter().enumerate() {
                    let qi = q[i][k];
                    integral += w * qi * qi;
                    node_weights[i][k] += 2.0 * w * qi;
                }
            }
        }
        for k in (0..channels).filter(|_| !self.kind.is_quadratic()) {
            let l = &self.effective[k];
            for i in 0..n - 1 {
                let dt = times[i + 1] - times[i];
                let (a, b) = (q[i][k], q[i + 1][k]);
                let (v, wa, wb) = pwl_cell(l, a, b, dt);
                integral += v;
                node_weights[i][k] += wa;
                node_weights[i + 1][k] += wb;
            }
        }
        let pairing = self.free.dot(p);
        let (value, factor) = if self.kind.is_fabre() {
            (0.5 * integral * integral + pairing, integral)
        } else {
            (integral + pairing, 1.0)
        };
        let mut gradient = DVector::<f64>::zeros(p.len());
        for (phi, w) in self.kernel.iter().zip(&node_weights) {
            gradient.gemv(factor, phi, w, 1.0);
        }
        gradient += &self.free;
        Ok(Evaluation {
            value,
            integral,
            gradient,
        })
    }

    /// Scale multiplying the penalization derivative in the control:
    /// `∫ℒ(Bᵀp)` (resp. `∫|Bᵀp|²`) for Fabre kinds, 1 otherwise.
    pub fn control_scale(&self, p: &DVector<f64>) -> Result<f64> {
        if self.kind.is_fabre() {
            Ok(self.evaluate(p)?.integral)
        } else {
            Ok(1.0)
        }
    }

    /// The continuous control `Λ·2Bᵀp(t)` of the quadratic kinds, linear between nodes.
    pub fn quadratic_control(&self, p: &DVector<f64>) -> Result<PiecewiseLinear> {
        if !self.kind.is_quadratic() {
            return Err(Error::Unsupported(format!(
                "quadratic control requested for kind {}",
                self.kind.label()
            )));
        }
        let scale = self.control_scale(p)?;
        let q = self.adjoint_outputs(p)?;
        PiecewiseLinear::new(
            self.quadrature.times().to_vec(),
            q.into_iter().map(|v| v * (2.0 * scale)).collect(),
        )
    }

    /// Cell-wise control built from the subgradient selection: tied cells
    /// take the certificate's selection, the others the scaled derivative of
    /// the penalization at the cell midpoint.
    pub fn relaxed_control(
        &self,
        p: &DVector<f64>,
        certificate: Option<&Certificate>,
    ) -> Result<PiecewiseConstant> {
        let scale = self.control_scale(p)?;
        let q = self.adjoint_outputs(p)?;
        let times = self.quadrature.times();
        let channels = self.sys.channels();
        let mut values: Vec<DVector<f64>> = (0..times.len() - 1)
            .map(|i| {
                let mut v = DVector::zeros(channels);
                for k in 0..channels {
                    let mid = 0.5 * (q[i][k] + q[i + 1][k]);
                    v[k] = if self.kind.is_quadratic() {
                        scale * 2.0 * mid
                    } else {
                        let l = &self.effective[k];
                        scale * l.subdifferential(mid).expect("full domain").midpoint()
                    };
                }
                v
            })
            .collect();
        if let Some(cert) = certificate {
            for tie in &cert.ties {
                values[tie.cell][tie.channel] = scale * tie.selection;
            }
        }
        PiecewiseConstant::new(times.to_vec(), values)
    }
}

/// Exact integral of a piecewise-linear `l` along the segment from `a` to `b`
/// over a cell of width `dt`, with its partial derivatives in `a` and `b`.
fn pwl_cell(l: &PwlConvex, a: f64, b: f64, dt: f64) -> (f64, f64, f64) {
    if a == b {
        let s = l.subdifferential(a).expect("full domain").midpoint();
        return (dt * l.value(a), 0.5 * dt * s, 0.5 * dt * s);
    }
    let bps = l.breakpoints();
    let slopes = l.slopes();
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let first = bps.partition_point(|&x| x <= lo);
    let last = bps.partition_point(|&x| x < hi);
    let span = b - a;
    let (mut value, mut wa, mut wb) = (0.0, 0.0, 0.0);
    let mut add = |t0: f64, t1: f64| {
        if t1 <= t0 {
            return;
        }
        let mid = a + 0.5 * (t0 + t1) * span;
        let s = slopes[l.segment_index(mid)];
        let len = t1 - t0;
        let quad = 0.5 * (t1 * t1 - t0 * t0);
        value += dt * len * l.value(mid);
        wa += dt * s * (len - quad);
        wb += dt * s * quad;
    };
    let mut prev = 0.0;
    if a < b {
        for &x in &bps[first..last] {
            let t = ((x - a) / span).clamp(prev, 1.0);
            add(prev, t);
            prev = t;
        }
    } else {
        for &x in bps[first..last].iter().rev() {
            let t = ((x - a) / span).clamp(prev, 1.0);
            add(prev, t);
            prev = t;
        }
    }
    add(prev, 1.0);
    (value, wa, wb)
}

/// `J(p_T)`.
pub fn eval_functional(prob: &DualProblem, p: &DVector<f64>) -> Result<f64> {
    Ok(prob.evaluate(p)?.value)
}

/// A subgradient of `J` at `p_T` (the gradient where `J` is differentiable;
/// cells sitting on a breakpoint use the midpoint of the slope interval).
pub fn eval_subgradient(prob: &DualProblem, p: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(prob.evaluate(p)?.gradient)
}

/// A cell whose adjoint output sits on a breakpoint at both ends, with the
/// slope selected for it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tie {
    pub cell: usize,
    pub channel: usize,
    pub breakpoint: f64,
    pub selection: f64,
}

/// Nonsmooth stationarity certificate: the smallest subgradient found when
/// every tied cell may pick any slope in its subdifferential interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub measure: f64,
    pub ties: Vec<Tie>,
}

/// Builds the interval-subgradient certificate at `p`.
pub fn stationarity_certificate(prob: &DualProblem, p: &DVector<f64>) -> Result<Certificate> {
    let eval = prob.evaluate(p)?;
    if prob.kind.is_quadratic() {
        return Ok(Certificate {
            measure: eval.gradient.norm(),
            ties: Vec::new(),
        });
    }
    let q = prob.adjoint_outputs(p)?;
    let times = prob.quadrature.times();
    let kernel_scale = prob
        .kernel
        .iter()
        .map(|phi| phi.norm())
        .fold(0.0, f64::max);
    let delta = (1e-9 * p.norm() * kernel_scale).max(1e-12);
    let factor = if prob.kind.is_fabre() { eval.integral } else { 1.0 };
    let n = prob.sys.state_dim();

    let mut ties = Vec::new();
    let mut columns: Vec<DVector<f64>> = Vec::new();
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    let mut start = Vec::new();
    // Remove the midpoint selection the gradient used on tied cells; the
    // optimizer below puts back the best selection.
    let mut fixed = eval.gradient.clone();
    for (k, l) in prob.effective.iter().enumerate() {
        let bps = l.breakpoints();
        let slopes = l.slopes();
        for i in 0..times.len() - 1 {
            let (a, b) = (q[i][k], q[i + 1][k]);
            let j = bps.partition_point(|&x| x < a - delta);
            let Some(&bp) = bps.get(j) else { continue };
            if (a - bp).abs() > delta || (b - bp).abs() > delta {
                continue;
            }
            let dt = times[i + 1] - times[i];
            let column = (prob.kernel[i].column(k) + prob.kernel[i + 1].column(k)) * (0.5 * dt * factor);
            let (_, wa, wb) = pwl_cell(l, a, b, dt);
            fixed -= prob.kernel[i].column(k) * (factor * wa) + prob.kernel[i + 1].column(k) * (factor * wb);
            let (lo, hi) = (slopes[j], slopes[j + 1]);
            ties.push(Tie {
                cell: i,
                channel: k,
                breakpoint: bp,
                selection: 0.5 * (lo + hi),
            });
            columns.push(column);
            lower.push(lo);
            upper.push(hi);
            start.push(0.5 * (lo + hi));
        }
    }
    if ties.is_empty() {
        return Ok(Certificate {
            measure: eval.gradient.norm(),
            ties,
        });
    }
    let mut v = DMatrix::<f64>::zeros(n, columns.len());
    for (j, c) in columns.iter().enumerate() {
        v.set_column(j, c);
    }
    let target = 0.1 * prob.optimizer.tolerance;
    let sol = box_least_squares(&v, &fixed, &lower, &upper, &DVector::from_vec(start), target, 20_000);
    for (tie, s) in ties.iter_mut().zip(sol.x.iter()) {
        tie.selection = *s;
    }
    Ok(Certificate {
        measure: sol.residual.min(eval.gradient.norm()),
        ties: if sol.residual <= eval.gradient.norm() { ties } else { Vec::new() },
    })
}

/// Outcome of [`minimize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    Diverged,
    IterationCapReached,
    /// No further progress and no stationarity certificate.
    Stalled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub value: f64,
    pub gradient_norm: f64,
    pub p_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    /// Best iterate found (the minimizer when converged).
    pub p_star: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    /// Stationarity measure at `p_star`.
    pub subgradient_norm: f64,
    /// Present when stationarity was certified through tied cells.
    pub certificate: Option<Certificate>,
    pub trace: Vec<IterationRecord>,
}

struct Point {
    p: DVector<f64>,
    eval: Evaluation,
}

const EARLY_CHECK_HALVINGS: usize = 20;
const EARLY_CHECK_SPACING: usize = 10;

/// Minimizes the dual functional by gradient descent.
pub fn minimize(prob: &DualProblem) -> Result<SolveReport> {
    let opts = prob.optimizer;
    let n = prob.sys.state_dim();
    let start = match opts.start {
        StartPoint::Zero => DVector::zeros(n),
        StartPoint::Random { seed, radius } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            DVector::from_fn(n, |_, _| rng.random_range(-radius..=radius))
        }
    };
    let eval_checked = |p: &DVector<f64>, iteration: usize| -> Result<Evaluation> {
        let e = prob.evaluate(p)?;
        if !e.value.is_finite() || e.gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                iteration,
                iterate: p.iter().copied().collect(),
            });
        }
        Ok(e)
    };

    let mut current = Point {
        eval: eval_checked(&start, 0)?,
        p: start,
    };
    let mut best = Point {
        p: current.p.clone(),
        eval: current.eval.clone(),
    };
    let mut trace = Vec::new();
    let mut decreasing_run = 0usize;
    let mut best_values: Vec<f64> = vec![best.eval.value];
    let mut prev_step = 0.0f64;
    let mut prev: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut last_early_check = 0usize;

    let finish = |status: SolveStatus,
                  best: &Point,
                  measure: f64,
                  certificate: Option<Certificate>,
                  iterations: usize,
                  trace: Vec<IterationRecord>| SolveReport {
        status,
        p_star: best.p.clone(),
        value: best.eval.value,
        iterations,
        subgradient_norm: measure,
        certificate,
        trace,
    };
    let certify = |best: &Point| -> Result<(bool, f64, Option<Certificate>)> {
        let cert = stationarity_certificate(prob, &best.p)?;
        let ok = cert.measure <= opts.tolerance;
        let measure = cert.measure;
        Ok((ok, measure, if cert.ties.is_empty() { None } else { Some(cert) }))
    };

    for k in 0..opts.max_iterations {
        let g = current.eval.gradient.clone();
        let gnorm = g.norm();
        let pnorm = current.p.norm();
        trace.push(IterationRecord {
            iteration: k,
            value: current.eval.value,
            gradient_norm: gnorm,
            p_norm: pnorm,
            step: prev_step,
        });
        if gnorm <= opts.tolerance {
            let measure = gnorm;
            let at = Point {
                p: current.p.clone(),
                eval: current.eval.clone(),
            };
            return Ok(finish(SolveStatus::Converged, &at, measure, None, k, trace));
        }
        if pnorm > opts.divergence_threshold && decreasing_run >= opts.divergence_window {
            return Ok(finish(SolveStatus::Diverged, &current, gnorm, None, k, trace));
        }
        if k >= opts.stall_window {
            let old = best_values[k - opts.stall_window];
            let now = best.eval.value;
            if old - now < opts.stall_tolerance * (1.0 + now.abs()) {
                let (ok, measure, cert) = certify(&best)?;
                let status = if ok {
                    SolveStatus::Converged
                } else {
                    SolveStatus::Stalled
                };
                log::debug!("stalled at iteration {k}; certificate measure {measure:e}");
                return Ok(finish(status, &best, measure, cert, k, trace));
            }
        }

        let next = match opts.step_rule {
            StepRule::BarzilaiBorwein => {
                let trial = match &prev {
                    None => 1.0 / gnorm.max(1.0),
                    Some((s, y)) => {
                        let sy = s.dot(y);
                        if sy > 0.0 {
                            s.norm_squared() / sy
                        } else {
                            2.0 * prev_step
                        }
                    }
                }
                .clamp(1e-20, 1e20);
                let mut alpha = trial;
                let mut accepted = None;
                let mut halvings = 0;
                let g2 = gnorm * gnorm;
                for _ in 0..60 {
                    let p_new = &current.p - &g * alpha;
                    let e = eval_checked(&p_new, k + 1)?;
                    let armijo = e.value <= current.eval.value - 1e-4 * alpha * g2;
                    let slack = 1e-10 * (1.0 + current.eval.value.abs());
                    let dir = e.gradient.dot(&g);
                    let wolfe = e.value <= current.eval.value + slack
                        && dir >= -0.8 * g2
                        && dir <= 0.9 * g2;
                    if armijo || wolfe {
                        accepted = Some(Point { p: p_new, eval: e });
                        break;
                    }
                    alpha *= 0.5;
                    halvings += 1;
                }
                match accepted {
                    Some(pt) => {
                        // Tiny accepted steps mean a kink is blocking descent.
                        if halvings > EARLY_CHECK_HALVINGS && k >= last_early_check + EARLY_CHECK_SPACING {
                            last_early_check = k;
                            let (ok, measure, cert) = certify(&best)?;
                            if ok {
                                log::debug!("certified at iteration {k}; measure {measure:e}");
                                return Ok(finish(SolveStatus::Converged, &best, measure, cert, k, trace));
                            }
                        }
                        prev_step = alpha;
                        pt
                    }
                    None => {
                        let (ok, measure, cert) = certify(&best)?;
                        let status = if ok {
                            SolveStatus::Converged
                        } else {
                            SolveStatus::Stalled
                        };
                        log::debug!("line search exhausted at iteration {k}; measure {measure:e}");
                        return Ok(finish(status, &best, measure, cert, k, trace));
                    }
                }
            }
            StepRule::Polyak { lower_bound } => {
                let alpha = ((current.eval.value - lower_bound) / (gnorm * gnorm)).max(0.0);
                prev_step = alpha;
                let p_new = &current.p - &g * alpha;
                let e = eval_checked(&p_new, k + 1)?;
                Point { p: p_new, eval: e }
            }
            StepRule::Diminishing { scale } => {
                let alpha = scale / (((k + 1) as f64).sqrt() * gnorm);
                prev_step = alpha;
                let p_new = &current.p - &g * alpha;
                let e = eval_checked(&p_new, k + 1)?;
                Point { p: p_new, eval: e }
            }
        };

        prev = Some((&next.p - &current.p, &next.eval.gradient - &g));
        if next.eval.value < best.eval.value {
            best = Point {
                p: next.p.clone(),
                eval: next.eval.clone(),
            };
            decreasing_run += 1;
        } else {
            decreasing_run = 0;
        }
        best_values.push(best.eval.value);
        current = next;
    }
    let measure = best.eval.gradient.norm();
    Ok(finish(
        SolveStatus::IterationCapReached,
        &best,
        measure,
        None,
        opts.max_iterations,
        trace,
    ))
}
