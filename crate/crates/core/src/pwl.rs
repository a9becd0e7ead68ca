//! Piecewise-linear convex functions of one variable.
//!
//! A [`PwlConvex`] is stored as a sorted list of nodes `(x_i, f(x_i))` plus the
//! slope on every gap between nodes, including the two unbounded ends. Nodes
//! are evaluation anchors, so `f(x_i)` is returned bit-for-bit; breakpoints are
//! the nodes where the slope actually changes.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two abscissae closer than this (relative to `1 + |x|`) are the same breakpoint.
pub const BREAK_TOL: f64 = 1e-12;

/// Strictly increasing interpolation points `u_1 < … < u_{M+1}`, at least three.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    points: Vec<f64>,
}

impl Partition {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::Domain(format!(
                "a partition needs at least 3 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("partition points must be finite".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("partition points must be strictly increasing".into()));
        }
        Ok(Self { points })
    }

    /// `segments + 1` equally spaced points on `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, segments: usize) -> Result<Self> {
        if segments < 2 || !(hi > lo) {
            return Err(Error::Domain(format!(
                "uniform partition needs lo < hi and >= 2 segments (got [{lo}, {hi}], {segments})"
            )));
        }
        let n = segments as f64;
        let points = (0..=segments)
            .map(|k| {
                let t = k as f64 / n;
                // Pin both ends and keep symmetric points symmetric.
                if k == segments {
                    hi
                } else {
                    lo + (hi - lo) * t
                }
            })
            .collect();
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Number of segments `M`.
    pub fn segments(&self) -> usize {
        self.points.len() - 1
    }

    /// Segment lengths `h_k`.
    pub fn spacings(&self) -> Vec<f64> {
        self.points.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// `h = max h_k`.
    pub fn max_spacing(&self) -> f64 {
        self.spacings().into_iter().fold(0.0, f64::max)
    }

    pub fn lo(&self) -> f64 {
        self.points[0]
    }

    pub fn hi(&self) -> f64 {
        self.points[self.points.len() - 1]
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A nonnegative, strictly convex profile `𝒫` with its second derivative.
#[derive(Clone)]
pub struct ConvexProfile {
    value: ScalarFn,
    second: ScalarFn,
    minimizer: f64,
}

impl fmt::Debug for ConvexProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConvexProfile")
            .field("minimizer", &self.minimizer)
            .finish_non_exhaustive()
    }
}

impl ConvexProfile {
    pub fn new(
        value: impl Fn(f64) -> f64 + Send + Sync + 'static,
        second_derivative: impl Fn(f64) -> f64 + Send + Sync + 'static,
        minimizer: f64,
    ) -> Self {
        Self {
            value: Arc::new(value),
            second: Arc::new(second_derivative),
            minimizer,
        }
    }

    /// `𝒫(u) = u²`.
    pub fn quadratic() -> Self {
        Self::shifted_quadratic(0.0)
    }

    /// `𝒫(u) = (u - c)²`.
    pub fn shifted_quadratic(center: f64) -> Self {
        Self::new(move |u| (u - center) * (u - center), |_| 2.0, center)
    }

    pub fn value(&self, u: f64) -> f64 {
        (self.value)(u)
    }

    pub fn second_derivative(&self, u: f64) -> f64 {
        (self.second)(u)
    }

    pub fn minimizer(&self) -> f64 {
        self.minimizer
    }

    /// Checks nonnegativity and strict convexity at sample points of `part`,
    /// and that the minimizer is a partition point.
    pub fn validate(&self, part: &Partition) -> Result<()> {
        if !part.points().contains(&self.minimizer) {
            return Err(Error::Domain(format!(
                "profile minimizer {} is not a partition point",
                self.minimizer
            )));
        }
        for u in sample_points(part, SAMPLES_PER_SEGMENT) {
            let v = self.value(u);
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!("profile value {v} at u = {u} is not >= 0")));
            }
            let d2 = self.second_derivative(u);
            if !(d2.is_finite() && d2 > 0.0) {
                return Err(Error::Domain(format!(
                    "profile second derivative {d2} at u = {u} is not > 0"
                )));
            }
        }
        Ok(())
    }
}

const SAMPLES_PER_SEGMENT: usize = 64;

fn sample_points(part: &Partition, per_segment: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(part.segments() * per_segment + 1);
    for w in part.points().windows(2) {
        for j in 0..per_segment {
            out.push(w[0] + (w[1] - w[0]) * j as f64 / per_segment as f64);
        }
    }
    out.push(part.hi());
    out
}

/// A closed interval of reals, possibly unbounded on either side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubdiffInterval {
    pub lower: f64,
    pub upper: f64,
}

impl SubdiffInterval {
    pub fn singleton(v: f64) -> Self {
        Self { lower: v, upper: v }
    }

    pub fn contains(&self, v: f64, slack: f64) -> bool {
        v >= self.lower - slack && v <= self.upper + slack
    }

    pub fn is_singleton(&self) -> bool {
        self.lower == self.upper
    }

    /// Midpoint for bounded intervals, the finite end for half-lines.
    pub fn midpoint(&self) -> f64 {
        match (self.lower.is_finite(), self.upper.is_finite()) {
            (true, true) => 0.5 * (self.lower + self.upper),
            (true, false) => self.lower,
            (false, true) => self.upper,
            (false, false) => 0.0,
        }
    }
}

/// A convex piecewise-linear function, `+∞` outside its (closed) domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwlConvex {
    /// Anchors `(x_i, f(x_i))`, strictly increasing in `x`, at least one.
    nodes: Vec<(f64, f64)>,
    /// `gaps[0]` applies left of the first node, `gaps[i]` between nodes
    /// `i-1` and `i`, the last entry right of the last node.
    gaps: Vec<f64>,
    lo: f64,
    hi: f64,
    /// Interval on which the function interpolates a profile, if any.
    interpolation: Option<(f64, f64)>,
    breakpoints: Vec<f64>,
    slopes: Vec<f64>,
}

fn same_point(a: f64, b: f64) -> bool {
    (a - b).abs() <= BREAK_TOL * (1.0 + a.abs().max(b.abs()))
}

impl PwlConvex {
    fn from_parts(
        nodes: Vec<(f64, f64)>,
        gaps: Vec<f64>,
        lo: f64,
        hi: f64,
        interpolation: Option<(f64, f64)>,
    ) -> Result<Self> {
        debug_assert_eq!(gaps.len(), nodes.len() + 1);
        if nodes.is_empty() {
            return Err(Error::Domain("piecewise-linear function needs a node".into()));
        }
        // Active gaps are those that intersect the domain.
        let first = if lo.is_finite() { 1 } else { 0 };
        let last = if hi.is_finite() { gaps.len() - 2 } else { gaps.len() - 1 };
        let mut breakpoints = Vec::new();
        let mut slopes = Vec::new();
        for g in first..=last {
            let s = gaps[g];
            if let Some(&prev) = slopes.last() {
                if s < prev {
                    return Err(Error::Domain(format!(
                        "slopes must be nondecreasing (convexity): {prev} then {s}"
                    )));
                }
                if s > prev {
                    breakpoints.push(nodes[g - 1].0);
                    slopes.push(s);
                }
            } else {
                slopes.push(s);
            }
        }
        Ok(Self {
            nodes,
            gaps,
            lo,
            hi,
            interpolation,
            breakpoints,
            slopes,
        })
    }

    /// Continuous piecewise-linear interpolant of `(points[k], values[k])`,
    /// extended linearly by the first and last chord.
    pub fn interpolate(points: &[f64], values: &[f64]) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::Dimension(format!(
                "{} points but {} values",
                points.len(),
                values.len()
            )));
        }
        let part = Partition::new(points.to_vec())?;
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("interpolation value {v} is not finite")));
        }
        let chords: Vec<f64> = points
            .windows(2)
            .zip(values.windows(2))
            .map(|(u, p)| (p[1] - p[0]) / (u[1] - u[0]))
            .collect();
        if chords.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Domain("interpolated values are not convex".into()));
        }
        let mut gaps = Vec::with_capacity(points.len() + 1);
        gaps.push(chords[0]);
        gaps.extend_from_slice(&chords);
        gaps.push(chords[chords.len() - 1]);
        let nodes = points.iter().copied().zip(values.iter().copied()).collect();
        Self::from_parts(
            nodes,
            gaps,
            f64::NEG_INFINITY,
            f64::INFINITY,
            Some((part.lo(), part.hi())),
        )
    }

    /// `x ↦ max_j (a_j x + c_j)` restricted to `domain`; pieces that never
    /// attain the maximum on the domain are dropped.
    pub fn from_max_of_affines(lines: &[(f64, f64)], domain: (f64, f64)) -> Result<Self> {
        let (lo, hi) = domain;
        if lines.is_empty() {
            return Err(Error::Domain("need at least one affine piece".into()));
        }
        if lines.iter().any(|(a, c)| !a.is_finite() || !c.is_finite()) {
            return Err(Error::Domain("affine pieces must be finite".into()));
        }
        if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
            return Err(Error::Domain(format!("invalid domain [{lo}, {hi}]")));
        }
        let mut sorted = lines.to_vec();
        sorted.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));
        // Equal slopes: only the largest intercept can be active.
        let mut dedup: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
        for l in sorted {
            match dedup.last_mut() {
                Some(last) if last.0 == l.0 => *last = l,
                _ => dedup.push(l),
            }
        }
        // Upper envelope over ℝ (convex hull trick).
        let cross = |p: (f64, f64), q: (f64, f64)| (p.1 - q.1) / (q.0 - p.0);
        let mut hull: Vec<(f64, f64)> = Vec::with_capacity(dedup.len());
        for l in dedup {
            while hull.len() >= 2 {
                let n = hull.len();
                if cross(hull[n - 2], l) <= cross(hull[n - 2], hull[n - 1]) {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(l);
        }
        // Envelope breakpoints; keep pieces whose interval meets the domain.
        let xs: Vec<f64> = hull.windows(2).map(|w| cross(w[0], w[1])).collect();
        let mut pieces = Vec::new();
        let mut cuts = Vec::new();
        for (j, &line) in hull.iter().enumerate() {
            let left = if j == 0 { f64::NEG_INFINITY } else { xs[j - 1] };
            let right = if j + 1 == hull.len() { f64::INFINITY } else { xs[j] };
            let meets = right > lo && left < hi || (lo == hi && left <= lo && lo <= right);
            if meets {
                if !pieces.is_empty() {
                    cuts.push(left);
                }
                pieces.push(line);
            }
        }
        let eval = |x: f64| pieces.iter().map(|(a, c)| a * x + c).fold(f64::NEG_INFINITY, f64::max);
        let mut xs_nodes = Vec::new();
        if lo.is_finite() {
            xs_nodes.push(lo);
        }
        for &c in &cuts {
            if xs_nodes.last().is_none_or(|&p| !same_point(p, c)) {
                xs_nodes.push(c);
            }
        }
        if hi.is_finite() && xs_nodes.last().is_none_or(|&p| !same_point(p, hi)) {
            xs_nodes.push(hi);
        }
        if xs_nodes.is_empty() {
            // A single line on all of ℝ: anchor at 0.
            xs_nodes.push(0.0);
        }
        let nodes: Vec<(f64, f64)> = xs_nodes.iter().map(|&x| (x, eval(x))).collect();
        let mut gaps = Vec::with_capacity(nodes.len() + 1);
        gaps.push(pieces[0].0);
        for w in xs_nodes.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            let slope = pieces
                .iter()
                .copied()
                .max_by(|p, q| (p.0 * mid + p.1).total_cmp(&(q.0 * mid + q.1)))
                .expect("nonempty")
                .0;
            gaps.push(slope);
        }
        gaps.push(pieces[pieces.len() - 1].0);
        Self::from_parts(nodes, gaps, lo, hi, None)
    }

    /// Interior breakpoints (slope changes inside the domain).
    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Distinct slopes on the domain, increasing; `slopes().len() == breakpoints().len() + 1`.
    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    /// Intercepts `c_j` such that piece `j` is `slopes()[j]·x + c_j`.
    pub fn intercepts(&self) -> Vec<f64> {
        self.slopes
            .iter()
            .enumerate()
            .map(|(j, &a)| {
                let x = self.piece_anchor(j);
                self.value(x) - a * x
            })
            .collect()
    }

    /// `(slope, intercept)` of every piece.
    pub fn affine_pieces(&self) -> Vec<(f64, f64)> {
        self.slopes.iter().copied().zip(self.intercepts()).collect()
    }

    fn piece_anchor(&self, j: usize) -> f64 {
        if j < self.breakpoints.len() {
            self.breakpoints[j]
        } else if let Some(&b) = self.breakpoints.last() {
            b
        } else {
            self.nodes[0].0
        }
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn interpolation_interval(&self) -> Option<(f64, f64)> {
        self.interpolation
    }

    pub fn nodes(&self) -> &[(f64, f64)] {
        &self.nodes
    }

    pub fn in_domain(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    /// `f(x)`, `+∞` outside the domain.
    pub fn value(&self, x: f64) -> f64 {
        if !self.in_domain(x) {
            return f64::INFINITY;
        }
        let i = self.nodes.partition_point(|&(nx, _)| nx <= x);
        if i == 0 {
            let (x0, y0) = self.nodes[0];
            y0 + self.gaps[0] * (x - x0)
        } else {
            let (xa, ya) = self.nodes[i - 1];
            if x == xa {
                ya
            } else {
                ya + self.gaps[i] * (x - xa)
            }
        }
    }

    /// `max_j (a_j x + c_j)` over the stored pieces; equals [`value`](Self::value) on the domain.
    pub fn max_form(&self, x: f64) -> f64 {
        if !self.in_domain(x) {
            return f64::INFINITY;
        }
        if self.slopes.is_empty() {
            return self.nodes[0].1;
        }
        self.affine_pieces()
            .iter()
            .map(|(a, c)| a * x + c)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index into [`slopes`](Self::slopes) of the piece containing `x`
    /// (the right piece at a breakpoint).
    pub fn segment_index(&self, x: f64) -> usize {
        self.breakpoints.partition_point(|&b| b <= x)
    }

    /// `∂f(x)` for the function as stored; `None` outside the domain.
    pub fn subdifferential(&self, x: f64) -> Option<SubdiffInterval> {
        if !self.in_domain(x) {
            return None;
        }
        if self.slopes.is_empty() {
            return Some(SubdiffInterval {
                lower: f64::NEG_INFINITY,
                upper: f64::INFINITY,
            });
        }
        let first = self.slopes[0];
        let last = self.slopes[self.slopes.len() - 1];
        let lower_end = if self.lo.is_finite() && same_point(x, self.lo) {
            Some(f64::NEG_INFINITY)
        } else {
            None
        };
        let upper_end = if self.hi.is_finite() && same_point(x, self.hi) {
            Some(f64::INFINITY)
        } else {
            None
        };
        match (lower_end, upper_end) {
            (Some(_), Some(_)) => {
                return Some(SubdiffInterval {
                    lower: f64::NEG_INFINITY,
                    upper: f64::INFINITY,
                })
            }
            (Some(lower), None) => return Some(SubdiffInterval { lower, upper: first }),
            (None, Some(upper)) => return Some(SubdiffInterval { lower: last, upper }),
            (None, None) => {}
        }
        let j = self.breakpoints.partition_point(|&b| b < x);
        if j < self.breakpoints.len() && same_point(self.breakpoints[j], x) {
            return Some(SubdiffInterval {
                lower: self.slopes[j],
                upper: self.slopes[j + 1],
            });
        }
        if j > 0 && same_point(self.breakpoints[j - 1], x) {
            return Some(SubdiffInterval {
                lower: self.slopes[j - 1],
                upper: self.slopes[j],
            });
        }
        Some(SubdiffInterval::singleton(self.slopes[j]))
    }

    /// `∂f(x)` for the restriction of the function to its interpolation
    /// interval `[ϖ1, ϖ2]`: half-lines at the two ends, `None` outside.
    /// Functions without an interpolation interval answer like
    /// [`subdifferential`](Self::subdifferential).
    pub fn clamped_subdifferential(&self, x: f64) -> Option<SubdiffInterval> {
        let Some((w1, w2)) = self.interpolation else {
            return self.subdifferential(x);
        };
        if x < w1 || x > w2 {
            return None;
        }
        let inner = self.subdifferential(x)?;
        if same_point(x, w1) {
            Some(SubdiffInterval {
                lower: f64::NEG_INFINITY,
                upper: inner.upper,
            })
        } else if same_point(x, w2) {
            Some(SubdiffInterval {
                lower: inner.lower,
                upper: f64::INFINITY,
            })
        } else {
            Some(inner)
        }
    }

    /// `argmin_v λ f(v) + ½(v - z)²` for `λ > 0`.
    pub fn prox(&self, z: f64, lambda: f64) -> f64 {
        let s = &self.slopes;
        if s.is_empty() {
            return z.clamp(self.lo, self.hi);
        }
        let b = &self.breakpoints;
        // z maps onto breakpoint j when z ∈ [b_j + λ s_j, b_j + λ s_{j+1}].
        let (mut lo, mut hi) = (0, b.len());
        while lo < hi {
            let mid = (lo + hi) / 2;
            if b[mid] + lambda * s[mid] <= z {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        let j = lo;
        let v = if j == 0 {
            z - lambda * s[0]
        } else if z <= b[j - 1] + lambda * s[j] {
            b[j - 1]
        } else {
            z - lambda * s[j]
        };
        v.clamp(self.lo, self.hi)
    }

    /// `β·f` for `β > 0`.
    pub fn scaled(&self, beta: f64) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::Domain(format!("scale must be positive, got {beta}")));
        }
        let nodes = self.nodes.iter().map(|&(x, y)| (x, beta * y)).collect();
        let gaps = self.gaps.iter().map(|g| beta * g).collect();
        Self::from_parts(nodes, gaps, self.lo, self.hi, self.interpolation)
    }

    /// Convex conjugate `f*(v) = sup_x (xv - f(x))`.
    ///
    /// The nodes of `f*` are the slopes of `f` and its slopes are the
    /// breakpoints of `f`. A finite end of the domain of `f` makes `f*` grow
    /// linearly with that end as slope; an unbounded end makes `f*` infinite
    /// beyond the extreme slope.
    pub fn conjugate(&self) -> Result<Self> {
        let vlo = if self.lo.is_finite() {
            f64::NEG_INFINITY
        } else {
            self.slopes[0]
        };
        let vhi = if self.hi.is_finite() {
            f64::INFINITY
        } else {
            self.slopes[self.slopes.len() - 1]
        };
        // Candidate maximizers: the finite domain ends and the breakpoints.
        let mut vertices: Vec<(f64, f64)> = Vec::new();
        if self.lo.is_finite() {
            vertices.push((self.lo, self.value(self.lo)));
        }
        for &b in &self.breakpoints {
            vertices.push((b, self.value(b)));
        }
        if self.hi.is_finite() && !same_point(self.hi, self.lo) {
            vertices.push((self.hi, self.value(self.hi)));
        }
        if vertices.is_empty() {
            // Affine on ℝ: f* is finite only at the slope.
            let a = self.slopes[0];
            let (x0, y0) = self.nodes[0];
            let value = a * x0 - y0;
            return Self::from_parts(vec![(a, value)], vec![x0, x0], a, a, None);
        }
        let conj = |v: f64| {
            vertices
                .iter()
                .map(|&(x, y)| x * v - y)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        // Nodes of f*: the slopes inside its domain.
        let nodes: Vec<(f64, f64)> = self
            .slopes
            .iter()
            .copied()
            .filter(|&s| s >= vlo && s <= vhi)
            .map(|s| (s, conj(s)))
            .collect();
        if nodes.is_empty() {
            // Point domain {x0}: f*(v) = x0·v - f(x0) on all of ℝ.
            let (x0, y0) = vertices[0];
            return Self::from_parts(
                vec![(0.0, -y0)],
                vec![x0, x0],
                f64::NEG_INFINITY,
                f64::INFINITY,
                None,
            );
        }
        let mut gaps = Vec::with_capacity(nodes.len() + 1);
        gaps.push(if self.lo.is_finite() { self.lo } else { vertices[0].0 });
        gaps.extend_from_slice(&self.breakpoints);
        gaps.push(if self.hi.is_finite() {
            self.hi
        } else {
            vertices[vertices.len() - 1].0
        });
        debug_assert_eq!(gaps.len(), nodes.len() + 1);
        Self::from_parts(nodes, gaps, vlo, vhi, None)
    }
}

/// Builds the penalization `ℒ` by interpolating `profile` at the partition points.
pub fn build_penalization(profile: &ConvexProfile, part: &Partition) -> Result<PwlConvex> {
    let values: Vec<f64> = part.points().iter().map(|&u| profile.value(u)).collect();
    for (&u, &v) in part.points().iter().zip(&values) {
        if !v.is_finite() {
            return Err(Error::Domain(format!("profile is not finite at u = {u}")));
        }
    }
    PwlConvex::interpolate(part.points(), &values)
}

/// Lower and upper barrier constants `α1 ≤ ℒ(u)/|u| ≤ α2` on `interval`.
pub fn barrier_constants(pwl: &PwlConvex, interval: (f64, f64)) -> Result<(f64, f64)> {
    let (w1, w2) = interval;
    if !(w1 < 0.0 && 0.0 < w2) {
        return Err(Error::Precondition(format!(
            "barrier interval [{w1}, {w2}] must contain 0 in its interior"
        )));
    }
    if !pwl.in_domain(w1) || !pwl.in_domain(w2) {
        return Err(Error::Precondition("barrier interval leaves the domain".into()));
    }
    let at_zero = pwl.value(0.0);
    if at_zero.abs() > BREAK_TOL {
        return Err(Error::Precondition(format!(
            "barriers need ℒ(0) = 0, got {at_zero}"
        )));
    }
    // ℒ(u)/|u| is monotone on each piece away from 0, so extremes sit at
    // breakpoints, at the interval ends, or at 0 as one-sided slopes.
    let ratio = |u: f64| pwl.value(u) / u.abs();
    let mut candidates: Vec<f64> = vec![ratio(w1), ratio(w2)];
    candidates.extend(
        pwl.breakpoints()
            .iter()
            .filter(|&&b| b > w1 && b < w2 && b != 0.0)
            .map(|&b| ratio(b)),
    );
    let at0 = pwl.subdifferential(0.0).expect("0 is in the domain");
    candidates.push(at0.upper);
    candidates.push(-at0.lower);
    let alpha1 = candidates.iter().copied().fold(f64::INFINITY, f64::min);
    let alpha2 = candidates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if alpha1 <= 0.0 {
        return Err(Error::Precondition(format!(
            "lower barrier degenerates (α1 = {alpha1})"
        )));
    }
    Ok((alpha1, alpha2))
}

/// Interpolation error bounds `e_k ≤ (h_k²/2)·max|𝒫''|` per segment and the global one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpErrorBound {
    pub per_segment: Vec<f64>,
    pub global: f64,
}

/// Bounds the gap between `profile` and its interpolant, sampling `𝒫''` densely.
pub fn interp_error_bound(profile: &ConvexProfile, part: &Partition) -> InterpErrorBound {
    let mut per_segment = Vec::with_capacity(part.segments());
    let mut curvature: f64 = 0.0;
    for w in part.points().windows(2) {
        let h = w[1] - w[0];
        let local = (0..=SAMPLES_PER_SEGMENT)
            .map(|j| profile.second_derivative(w[0] + h * j as f64 / SAMPLES_PER_SEGMENT as f64).abs())
            .fold(0.0, f64::max);
        curvature = curvature.max(local);
        per_segment.push(0.5 * h * h * local);
    }
    let h = part.max_spacing();
    InterpErrorBound {
        per_segment,
        global: 0.5 * h * h * curvature,
    }
}

/// Largest `|ℒ(u) - 𝒫(u)|` over `samples_per_segment` points per segment.
pub fn measured_interp_error(
    profile: &ConvexProfile,
    pwl: &PwlConvex,
    part: &Partition,
    samples_per_segment: usize,
) -> f64 {
    sample_points(part, samples_per_segment.max(1))
        .into_iter()
        .map(|u| (pwl.value(u) - profile.value(u)).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig2() -> PwlConvex {
        let part = Partition::new(vec![-1.0, -0.5, 0.0, 0.5, 1.0]).unwrap();
        build_penalization(&ConvexProfile::quadratic(), &part).unwrap()
    }

    fn abs() -> PwlConvex {
        PwlConvex::from_max_of_affines(&[(-1.0, 0.0), (1.0, 0.0)], (f64::NEG_INFINITY, f64::INFINITY)).unwrap()
    }

    #[test]
    fn prox_matches_grid_minimization() {
        let l = fig2();
        let lc = l.conjugate().unwrap();
        for f in [&l, &lc] {
            for &lambda in &[0.01, 0.3, 2.0] {
                for k in 0..81 {
                    let z = -2.0 + 0.05 * k as f64;
                    let v = f.prox(z, lambda);
                    let obj = |x: f64| lambda * f.value(x) + 0.5 * (x - z) * (x - z);
                    for j in 0..4001 {
                        let x = -2.0 + 1e-3 * j as f64;
                        assert!(obj(v) <= obj(x) + 1e-12, "z={z} λ={lambda} v={v} x={x}");
                    }
                }
            }
        }
    }

    #[test]
    fn fig2_values() {
        let l = fig2();
        let expect = [1.0, 0.25, 0.0, 0.25, 1.0];
        for (u, e) in [-1.0, -0.5, 0.0, 0.5, 1.0].iter().zip(expect) {
            assert_eq!(l.value(*u), e);
        }
        assert!((l.value(0.25) - 0.125).abs() < 1e-15);
        assert!((l.value(2.0) - 2.5).abs() < 1e-15);
        assert!((l.value(-2.0) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn fig2_slopes() {
        assert_eq!(fig2().slopes(), &[-1.5, -0.5, 0.5, 1.5]);
        assert_eq!(fig2().breakpoints(), &[-0.5, 0.0, 0.5]);
    }

    #[test]
    fn flat_segment_has_zero_slope() {
        let l = PwlConvex::interpolate(&[0.0, 1.0, 2.0, 3.0], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(l.slopes(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn fig2_subdifferential() {
        let l = fig2();
        assert_eq!(l.subdifferential(0.25).unwrap(), SubdiffInterval::singleton(0.5));
        assert_eq!(
            l.subdifferential(0.0).unwrap(),
            SubdiffInterval { lower: -0.5, upper: 0.5 }
        );
        assert_eq!(
            l.subdifferential(0.5).unwrap(),
            SubdiffInterval { lower: 0.5, upper: 1.5 }
        );
        // Extended view: the partition ends are interior points of the outer pieces.
        assert_eq!(l.subdifferential(1.0).unwrap(), SubdiffInterval::singleton(1.5));
        assert_eq!(l.subdifferential(3.0).unwrap(), SubdiffInterval::singleton(1.5));
    }

    #[test]
    fn clamped_subdifferential_has_half_lines() {
        let l = fig2();
        assert_eq!(
            l.clamped_subdifferential(-1.0).unwrap(),
            SubdiffInterval { lower: f64::NEG_INFINITY, upper: -1.5 }
        );
        assert_eq!(
            l.clamped_subdifferential(1.0).unwrap(),
            SubdiffInterval { lower: 1.5, upper: f64::INFINITY }
        );
        assert!(l.clamped_subdifferential(1.2).is_none());
        assert_eq!(l.clamped_subdifferential(0.25).unwrap(), SubdiffInterval::singleton(0.5));
    }

    #[test]
    fn conjugate_of_abs_is_indicator() {
        let c = abs().conjugate().unwrap();
        assert_eq!(c.domain(), (-1.0, 1.0));
        for v in [-1.0, -0.3, 0.0, 0.7, 1.0] {
            assert_eq!(c.value(v), 0.0);
        }
        assert_eq!(c.value(1.01), f64::INFINITY);
        assert_eq!(c.value(-1.01), f64::INFINITY);
    }

    #[test]
    fn conjugate_of_two_lines() {
        let f = PwlConvex::from_max_of_affines(&[(1.0, 0.0), (2.0, -1.0)], (f64::NEG_INFINITY, f64::INFINITY)).unwrap();
        let c = f.conjugate().unwrap();
        assert_eq!(c.domain(), (1.0, 2.0));
        for v in [1.0, 1.25, 1.5, 2.0] {
            assert!((c.value(v) - (v - 1.0)).abs() < 1e-15);
        }
        assert_eq!(c.value(2.5), f64::INFINITY);
    }

    #[test]
    fn conjugate_of_fig2() {
        let c = fig2().conjugate().unwrap();
        assert_eq!(c.domain(), (-1.5, 1.5));
        assert_eq!(c.slopes(), &[-0.5, 0.0, 0.5]);
        assert_eq!(c.breakpoints(), &[-0.5, 0.5]);
        assert!((c.value(0.0)).abs() < 1e-15);
        assert!((c.value(1.5) - 0.5).abs() < 1e-15);
        assert!((c.value(-1.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn biconjugate_recovers_fig2() {
        let l = fig2();
        let back = l.conjugate().unwrap().conjugate().unwrap();
        assert_eq!(back.domain(), (f64::NEG_INFINITY, f64::INFINITY));
        for k in -40..=40 {
            let u = k as f64 * 0.07;
            assert!((back.value(u) - l.value(u)).abs() < 1e-12, "u = {u}");
        }
    }

    #[test]
    fn conjugate_of_affine_on_line_and_interval() {
        let f = PwlConvex::from_max_of_affines(&[(2.0, 3.0)], (f64::NEG_INFINITY, f64::INFINITY)).unwrap();
        let c = f.conjugate().unwrap();
        assert_eq!(c.domain(), (2.0, 2.0));
        assert_eq!(c.value(2.0), -3.0);
        let back = c.conjugate().unwrap();
        assert!((back.value(1.7) - f.value(1.7)).abs() < 1e-14);

        let g = PwlConvex::from_max_of_affines(&[(1.0, 0.0)], (-1.0, 2.0)).unwrap();
        let gc = g.conjugate().unwrap();
        for v in [-3.0, 0.0, 1.0, 4.0] {
            let oracle = (1.0f64 - v).max(2.0 * v - 2.0);
            assert!((gc.value(v) - oracle).abs() < 1e-14);
        }
    }

    #[test]
    fn redundant_pieces_dropped() {
        let f = PwlConvex::from_max_of_affines(
            &[(-1.0, 0.0), (0.0, -5.0), (1.0, 0.0), (1.0, -2.0)],
            (f64::NEG_INFINITY, f64::INFINITY),
        )
        .unwrap();
        assert_eq!(f.slopes(), &[-1.0, 1.0]);
        assert_eq!(f.breakpoints(), &[0.0]);
    }

    #[test]
    fn max_form_matches_segments() {
        let l = fig2();
        for k in -30..=30 {
            let u = k as f64 * 0.1 + 0.013;
            assert!((l.max_form(u) - l.value(u)).abs() < 1e-12);
        }
    }

    #[test]
    fn barrier_examples() {
        let (a1, a2) = barrier_constants(&fig2(), (-1.0, 1.0)).unwrap();
        assert!((a1 - 0.5).abs() < 1e-15 && (a2 - 1.0).abs() < 1e-15);
        assert_eq!(barrier_constants(&abs(), (-1.0, 1.0)).unwrap(), (1.0, 1.0));
        let (b1, b2) = barrier_constants(&fig2().scaled(3.0).unwrap(), (-1.0, 1.0)).unwrap();
        assert!((b1 - 1.5).abs() < 1e-15 && (b2 - 3.0).abs() < 1e-15);
        let shifted = PwlConvex::interpolate(&[-1.0, 0.0, 1.0], &[2.0, 1.0, 2.0]).unwrap();
        assert!(matches!(
            barrier_constants(&shifted, (-1.0, 1.0)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn interp_bound_examples() {
        let part = Partition::uniform(-1.0, 1.0, 4).unwrap();
        let profile = ConvexProfile::quadratic();
        let bound = interp_error_bound(&profile, &part);
        assert!((bound.global - 0.25).abs() < 1e-15);
        let measured = measured_interp_error(&profile, &build_penalization(&profile, &part).unwrap(), &part, 64);
        assert!((measured - 0.0625).abs() < 1e-15);
        let finer = interp_error_bound(&profile, &Partition::uniform(-1.0, 1.0, 8).unwrap());
        assert!((finer.global * 4.0 - bound.global).abs() < 1e-15);
    }

    #[test]
    fn uniform_partition_is_symmetric() {
        let part = Partition::uniform(-1.0, 1.0, 4).unwrap();
        assert_eq!(part.points(), &[-1.0, -0.5, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn profile_validation() {
        let part = Partition::uniform(-1.0, 1.0, 4).unwrap();
        assert!(ConvexProfile::quadratic().validate(&part).is_ok());
        assert!(ConvexProfile::shifted_quadratic(0.3).validate(&part).is_err());
        let concave = ConvexProfile::new(|u| 1.0 - u * u, |_| -2.0, 0.0);
        assert!(concave.validate(&part).is_err());
    }

    #[test]
    fn rejects_nonconvex_table() {
        assert!(PwlConvex::interpolate(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]).is_err());
        assert!(Partition::new(vec![0.0, 1.0]).is_err());
        assert!(Partition::new(vec![0.0, 1.0, 1.0]).is_err());
    }
}
