//! Dense small-matrix machinery for the plant `x' = Ax + Bu` and its adjoint `-p' = Aᵀp`.
//!
//! Everything here works on `nalgebra` dynamic matrices. State dimensions are
//! expected to be small (a handful up to ~16), so all operations are dense.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when checking that a time grid spans `[0, T]`.
const GRID_END_TOL: f64 = 1e-12;

/// Singular values below this fraction of the largest one count as zero.
pub const RANK_TOL: f64 = 1e-10;

/// `‖A + Aᵀ‖_max` at or below this classifies `A` as conservative.
pub const SKEW_TOL: f64 = 1e-12;

/// Spectral abscissa below `-DISSIPATIVE_TOL` classifies `A` as dissipative.
pub const DISSIPATIVE_TOL: f64 = 1e-10;

/// A linear time-invariant plant together with its initial state and horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    x0: DVector<f64>,
    horizon: f64,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, x0: DVector<f64>, horizon: f64) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::Dimension(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "B must be {n}xK with K >= 1, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if x0.len() != n {
            return Err(Error::Dimension(format!(
                "x0 has length {}, expected {n}",
                x0.len()
            )));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        if a.iter().chain(b.iter()).chain(x0.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("system data must be finite".into()));
        }
        Ok(Self { a, b, x0, horizon })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn channels(&self) -> usize {
        self.b.ncols()
    }

    /// Same plant with a different initial state.
    pub fn with_initial_state(&self, x0: DVector<f64>) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), x0, self.horizon)
    }

    /// Same plant with a different horizon.
    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), self.x0.clone(), horizon)
    }

    /// `e^{TA} x0`, the free terminal state.
    pub fn free_terminal_state(&self) -> DVector<f64> {
        mat_exp(&self.a, self.horizon).expect("square by construction") * &self.x0
    }
}

/// Sampled state path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub grid: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn terminal(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory is never empty")
    }
}

/// Qualitative class of the free dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dynamics {
    /// `A = -Aᵀ`; the free flow is an isometry.
    Conservative,
    /// Every eigenvalue has negative real part.
    Dissipative,
    General,
}

// Padé coefficients and switching thresholds from Higham's scaling-and-squaring
// analysis (θ_m bounds on ‖A‖₁ for a unit-roundoff backward error).
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA: [f64; 5] = [
    1.495585217958292e-2,
    2.539398330063230e-1,
    9.504178996162932e-1,
    2.097847961257068,
    5.371920351148152,
];

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Odd/even Padé parts for degree 3..9.
fn pade_low(a: &DMatrix<f64>, coeffs: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let a2 = a * a;
    let mut power = DMatrix::<f64>::identity(n, n);
    let mut odd = DMatrix::<f64>::zeros(n, n);
    let mut even = DMatrix::<f64>::zeros(n, n);
    for pair in coeffs.chunks(2) {
        even += &power * pair[0];
        odd += &power * pair[1];
        power = &power * &a2;
    }
    (a * odd, even)
}

fn pade13(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let b = &PADE13;
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = a * (inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1]);
    let inner_v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    (u, v)
}

/// `e^{tA}` by scaling and squaring with a Padé kernel of degree 3..13.
pub fn mat_exp(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "matrix exponential needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if !t.is_finite() {
        return Err(Error::Domain(format!("time must be finite, got {t}")));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let scaled = a * t;
    let norm = norm1(&scaled);
    if norm == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    let (mut squarings, (u, v)) = if norm <= THETA[0] {
        (0, pade_low(&scaled, &PADE3))
    } else if norm <= THETA[1] {
        (0, pade_low(&scaled, &PADE5))
    } else if norm <= THETA[2] {
        (0, pade_low(&scaled, &PADE7))
    } else if norm <= THETA[3] {
        (0, pade_low(&scaled, &PADE9))
    } else {
        let s = (norm / THETA[4]).log2().ceil().max(0.0) as i32;
        let reduced = &scaled * 2f64.powi(-s);
        (s, pade13(&reduced))
    };
    let numer = &v + &u;
    let denom = &v - &u;
    let mut result = denom
        .lu()
        .solve(&numer)
        .ok_or_else(|| Error::Numerical("singular Padé denominator".into()))?;
    while squarings > 0 {
        result = &result * &result;
        squarings -= 1;
    }
    Ok(result)
}

/// Rank of the controllability matrix `[B | AB | … | A^{N-1}B]`.
pub fn kalman_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<usize> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n {
        return Err(Error::Dimension(format!(
            "A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let k = b.ncols();
    if n == 0 || k == 0 {
        return Ok(0);
    }
    let mut ctrb = DMatrix::<f64>::zeros(n, n * k);
    let mut block = b.clone();
    for j in 0..n {
        ctrb.view_mut((0, j * k), (n, k)).copy_from(&block);
        block = a * block;
    }
    let svd = ctrb.svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(svd
        .singular_values
        .iter()
        .filter(|&&s| s > RANK_TOL * smax)
        .count())
}

/// Classifies `A` as conservative (skew-symmetric), dissipative (spectral
/// abscissa negative) or general.
pub fn classify_dynamics(a: &DMatrix<f64>) -> Result<Dynamics> {
    if !a.is_square() {
        return Err(Error::Dimension("dynamics matrix must be square".into()));
    }
    let skew = (a + a.transpose()).amax();
    if skew <= SKEW_TOL {
        return Ok(Dynamics::Conservative);
    }
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("eigenvalue iteration did not converge".into()))?;
    let abscissa = schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if abscissa < -DISSIPATIVE_TOL {
        Ok(Dynamics::Dissipative)
    } else {
        Ok(Dynamics::General)
    }
}

/// `p(t) = e^{(T-t)Aᵀ} p_T`.
pub fn adjoint_state(sys: &LtiSystem, p_terminal: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    if p_terminal.len() != sys.state_dim() {
        return Err(Error::Dimension(format!(
            "adjoint datum has length {}, expected {}",
            p_terminal.len(),
            sys.state_dim()
        )));
    }
    if !(0.0..=sys.horizon()).contains(&t) {
        return Err(Error::Domain(format!(
            "t = {t} outside [0, {}]",
            sys.horizon()
        )));
    }
    Ok(mat_exp(&sys.a().transpose(), sys.horizon() - t)? * p_terminal)
}

/// Samples `e^{(T-t)A} B` at each time, i.e. the map `p_T ↦ Bᵀp(t)` transposed.
///
/// Propagates backwards from `T` one cell at a time; cells of (nearly) equal
/// width share one exponential.
pub fn input_kernel(sys: &LtiSystem, times: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    check_increasing(times)?;
    let horizon = sys.horizon();
    if let Some(&last) = times.last() {
        if last > horizon * (1.0 + GRID_END_TOL) || times[0] < -horizon * GRID_END_TOL {
            return Err(Error::Domain("kernel times must lie in [0, T]".into()));
        }
    } else {
        return Ok(Vec::new());
    }
    let mut cache = ExpCache::new(sys.a());
    let mut out = vec![DMatrix::zeros(0, 0); times.len()];
    let last = times.len() - 1;
    out[last] = cache.exp(horizon - times[last])? * sys.b();
    for i in (0..last).rev() {
        let step = cache.exp(times[i + 1] - times[i])?;
        out[i] = step * &out[i + 1];
    }
    Ok(out)
}

fn check_increasing(times: &[f64]) -> Result<()> {
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::Domain("time grid must be finite".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("time grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Quantizes a step length so that nearly equal steps share a cache slot.
/// Dropping 12 mantissa bits perturbs the step by at most ~2e-13 relative.
fn step_key(h: f64) -> u64 {
    h.to_bits() >> 12
}

struct ExpCache<'a> {
    a: &'a DMatrix<f64>,
    map: HashMap<u64, DMatrix<f64>>,
}

impl<'a> ExpCache<'a> {
    fn new(a: &'a DMatrix<f64>) -> Self {
        Self {
            a,
            map: HashMap::new(),
        }
    }

    fn exp(&mut self, h: f64) -> Result<DMatrix<f64>> {
        let key = step_key(h);
        if let Some(m) = self.map.get(&key) {
            return Ok(m.clone());
        }
        let m = mat_exp(self.a, h)?;
        self.map.insert(key, m.clone());
        Ok(m)
    }
}

/// Exact one-step propagators for an input that is affine on a step of length `h`:
/// `x(h) = F x(0) + G0 u(0) + G1 (u(h) - u(0)) / h` with
/// `F = e^{hA}`, `G0 = ∫₀ʰ e^{sA} ds B`, `G1 = ∫₀ʰ e^{(h-s)A} s ds B`.
#[derive(Debug, Clone)]
pub struct HoldPropagator {
    pub flow: DMatrix<f64>,
    pub zero_order: DMatrix<f64>,
    pub first_order: DMatrix<f64>,
    pub step: f64,
}

impl HoldPropagator {
    pub fn new(a: &DMatrix<f64>, b: &DMatrix<f64>, h: f64) -> Result<Self> {
        let n = a.nrows();
        let k = b.ncols();
        let dim = n + 2 * k;
        let mut aug = DMatrix::<f64>::zeros(dim, dim);
        aug.view_mut((0, 0), (n, n)).copy_from(a);
        aug.view_mut((0, n), (n, k)).copy_from(b);
        for j in 0..k {
            aug[(n + j, n + k + j)] = 1.0;
        }
        let e = mat_exp(&aug, h)?;
        Ok(Self {
            flow: e.view((0, 0), (n, n)).into_owned(),
            zero_order: e.view((0, n), (n, k)).into_owned(),
            first_order: e.view((0, n + k), (n, k)).into_owned(),
            step: h,
        })
    }

    pub fn advance(&self, x: &DVector<f64>, u_start: &DVector<f64>, u_end: &DVector<f64>) -> DVector<f64> {
        let slope = (u_end - u_start) / self.step;
        &self.flow * x + &self.zero_order * u_start + &self.first_order * slope
    }
}

/// A control input `u: [0, T] → ℝᴷ` that is affine between consecutive knots.
///
/// Piecewise-constant signals report equal start and end values on every
/// knot-free interval, piecewise-linear ones report their interpolated values.
pub trait ControlSignal {
    fn channels(&self) -> usize;

    /// Interior times where the signal jumps or changes slope, increasing.
    fn knots(&self) -> Vec<f64>;

    /// Values at the two ends of `[start, end]`, an interval free of knots.
    fn on_interval(&self, start: f64, end: f64) -> (DVector<f64>, DVector<f64>);

    /// Right-continuous point value.
    fn value(&self, t: f64) -> DVector<f64>;
}

/// The zero input.
#[derive(Debug, Clone, Copy)]
pub struct ZeroControl {
    pub channels: usize,
}

impl ControlSignal for ZeroControl {
    fn channels(&self) -> usize {
        self.channels
    }

    fn knots(&self) -> Vec<f64> {
        Vec::new()
    }

    fn on_interval(&self, _start: f64, _end: f64) -> (DVector<f64>, DVector<f64>) {
        (DVector::zeros(self.channels), DVector::zeros(self.channels))
    }

    fn value(&self, _t: f64) -> DVector<f64> {
        DVector::zeros(self.channels)
    }
}

/// Piecewise-constant input: `values[j]` holds on `[edges[j], edges[j+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseConstant {
    edges: Vec<f64>,
    values: Vec<DVector<f64>>,
}

impl PiecewiseConstant {
    /// `edges` runs from 0 to T inclusive; `values.len() == edges.len() - 1`.
    pub fn new(edges: Vec<f64>, values: Vec<DVector<f64>>) -> Result<Self> {
        if edges.len() < 2 || values.len() + 1 != edges.len() {
            return Err(Error::Dimension(format!(
                "{} edges need {} values, got {}",
                edges.len(),
                edges.len().saturating_sub(1),
                values.len()
            )));
        }
        check_increasing(&edges)?;
        let k = values[0].len();
        if values.iter().any(|v| v.len() != k) {
            return Err(Error::Dimension("inconsistent channel count".into()));
        }
        Ok(Self { edges, values })
    }

    pub fn constant(horizon: f64, value: DVector<f64>) -> Result<Self> {
        Self::new(vec![0.0, horizon], vec![value])
    }

    fn locate(&self, t: f64) -> usize {
        let inner = &self.edges[1..self.edges.len() - 1];
        inner.partition_point(|&e| e <= t)
    }
}

impl ControlSignal for PiecewiseConstant {
    fn channels(&self) -> usize {
        self.values[0].len()
    }

    fn knots(&self) -> Vec<f64> {
        self.edges[1..self.edges.len() - 1].to_vec()
    }

    fn on_interval(&self, start: f64, end: f64) -> (DVector<f64>, DVector<f64>) {
        let v = self.values[self.locate(0.5 * (start + end))].clone();
        (v.clone(), v)
    }

    fn value(&self, t: f64) -> DVector<f64> {
        self.values[self.locate(t)].clone()
    }
}

/// Continuous piecewise-linear input through `(times[i], values[i])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    times: Vec<f64>,
    values: Vec<DVector<f64>>,
}

impl PiecewiseLinear {
    pub fn new(times: Vec<f64>, values: Vec<DVector<f64>>) -> Result<Self> {
        if times.len() < 2 || times.len() != values.len() {
            return Err(Error::Dimension("need matching times and values (>= 2)".into()));
        }
        check_increasing(&times)?;
        let k = values[0].len();
        if values.iter().any(|v| v.len() != k) {
            return Err(Error::Dimension("inconsistent channel count".into()));
        }
        Ok(Self { times, values })
    }

    fn interpolate(&self, t: f64) -> DVector<f64> {
        let last = self.times.len() - 1;
        let j = self.times.partition_point(|&s| s <= t).clamp(1, last);
        let (t0, t1) = (self.times[j - 1], self.times[j]);
        let theta = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        &self.values[j - 1] * (1.0 - theta) + &self.values[j] * theta
    }
}

impl ControlSignal for PiecewiseLinear {
    fn channels(&self) -> usize {
        self.values[0].len()
    }

    fn knots(&self) -> Vec<f64> {
        self.times[1..self.times.len() - 1].to_vec()
    }

    fn on_interval(&self, start: f64, end: f64) -> (DVector<f64>, DVector<f64>) {
        (self.interpolate(start), self.interpolate(end))
    }

    fn value(&self, t: f64) -> DVector<f64> {
        self.interpolate(t)
    }
}

/// Integrates `x' = Ax + Bu` over `grid`, exactly for inputs that are affine
/// between knots: the grid is merged with the input's knots and each
/// sub-interval is advanced with [`HoldPropagator`].
pub fn simulate_forward(sys: &LtiSystem, u: &dyn ControlSignal, grid: &[f64]) -> Result<Trajectory> {
    if u.channels() != sys.channels() {
        return Err(Error::Dimension(format!(
            "control has {} channels, system has {}",
            u.channels(),
            sys.channels()
        )));
    }
    check_increasing(grid)?;
    let horizon = sys.horizon();
    let covers = grid.len() >= 2
        && grid[0].abs() <= GRID_END_TOL * horizon
        && (grid[grid.len() - 1] - horizon).abs() <= GRID_END_TOL * horizon;
    if !covers {
        return Err(Error::Domain(format!("grid must run from 0 to T = {horizon}")));
    }

    let knots = u.knots();
    let mut cache: HashMap<u64, HoldPropagator> = HashMap::new();
    let mut advance = |x: &DVector<f64>, a: f64, b: f64| -> Result<DVector<f64>> {
        let h = b - a;
        let key = step_key(h);
        if let Entry::Vacant(slot) = cache.entry(key) {
            slot.insert(HoldPropagator::new(sys.a(), sys.b(), h)?);
        }
        let (ua, ub) = u.on_interval(a, b);
        Ok(cache[&key].advance(x, &ua, &ub))
    };

    let mut states = Vec::with_capacity(grid.len());
    let mut x = sys.x0().clone();
    states.push(x.clone());
    let mut next_knot = knots.partition_point(|&k| k <= grid[0]);
    for w in grid.windows(2) {
        let (mut a, b) = (w[0], w[1]);
        while next_knot < knots.len() && knots[next_knot] < b {
            let k = knots[next_knot];
            if k > a {
                x = advance(&x, a, k)?;
                a = k;
            }
            next_knot += 1;
        }
        x = advance(&x, a, b)?;
        states.push(x.clone());
    }
    Ok(Trajectory {
        grid: grid.to_vec(),
        states,
    })
}

/// `n` equally spaced times from 0 to `horizon` inclusive.
pub fn uniform_grid(horizon: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "a grid needs at least two nodes");
    let last = (n - 1) as f64;
    (0..n).map(|i| horizon * (i as f64) / last).collect()
}
