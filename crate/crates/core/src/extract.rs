//! Turning an optimal adjoint datum into an explicit multilevel control.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dual::DualProblem;
use crate::error::{Error, Result};
use crate::lti::{self, ControlSignal};

/// Samples within this distance of a breakpoint (relative to `1 + |b|`)
/// count as sitting on it.
pub const ON_BREAKPOINT_TOL: f64 = 1e-10;

/// Bisection stops once the bracket is this narrow.
pub const BISECTION_TOL: f64 = 1e-12;

pub const BISECTION_MAX_ITER: usize = 50;

/// Default density of the bracketing grid relative to the quadrature grid.
pub const DEFAULT_BRACKET_REFINEMENT: usize = 8;

/// A time where the adjoint output meets a breakpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub time: f64,
    pub breakpoint: f64,
    /// +1 when the output increases through the breakpoint, -1 otherwise;
    /// 0 for touches.
    pub direction: i8,
}

/// An interval of positive length on which the output stays on a breakpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub breakpoint: f64,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Switchings {
    /// Sign-changing crossings, increasing in time.
    pub crossings: Vec<Crossing>,
    /// Grazing contacts without a sign change.
    pub touches: Vec<Crossing>,
    pub plateaus: Vec<Plateau>,
}

/// Bracketing samples: grid nodes interleaved with cell midpoints.
fn bracket_samples(grid: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * grid.len());
    for w in grid.windows(2) {
        out.push(w[0]);
        out.push(0.5 * (w[0] + w[1]));
    }
    if let Some(&last) = grid.last() {
        out.push(last);
    }
    out
}

/// All times in the open interval `(grid[0], grid[last])` where `q` crosses
/// one of `breakpoints`, refined by bisection.
pub fn find_switchings(q: &dyn Fn(f64) -> f64, breakpoints: &[f64], grid: &[f64]) -> Result<Switchings> {
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Domain("bracketing grid must be strictly increasing".into()));
    }
    let times = bracket_samples(grid);
    let values: Vec<f64> = times.iter().map(|&t| q(t)).collect();
    find_switchings_sampled(q, &times, &values, breakpoints)
}

/// [`find_switchings`] with `q` already sampled at [`bracket_samples`] of the grid.
fn find_switchings_sampled(
    q: &dyn Fn(f64) -> f64,
    times: &[f64],
    values: &[f64],
    breakpoints: &[f64],
) -> Result<Switchings> {
    let mut out = Switchings::default();
    let last_index = times.len() - 1;
    for &b in breakpoints {
        let tol = ON_BREAKPOINT_TOL * (1.0 + b.abs());
        let f = |j: usize| values[j] - b;
        let mut crossings_here: Vec<(usize, Crossing)> = Vec::new();
        let mut last_nonzero: Option<(usize, f64)> = None;
        let mut run_start: Option<usize> = None;
        let push_crossing = |lo: usize, hi: usize, rising: bool, out: &mut Vec<(usize, Crossing)>| {
            let time = bisect(q, b, times[lo], times[hi], rising);
            out.push((
                lo / 2,
                Crossing {
                    time,
                    breakpoint: b,
                    direction: if rising { 1 } else { -1 },
                },
            ));
        };
        for j in 0..times.len() {
            let fj = f(j);
            if fj.abs() <= tol {
                run_start.get_or_insert(j);
                continue;
            }
            let sign = fj.signum();
            if let Some(r) = run_start.take() {
                if j - r >= 2 {
                    out.plateaus.push(Plateau {
                        breakpoint: b,
                        start: times[r],
                        end: times[j - 1],
                    });
                } else if r > 0 {
                    match last_nonzero {
                        Some((li, ls)) if ls != sign => {
                            push_crossing(li, j, sign > 0.0, &mut crossings_here)
                        }
                        Some(_) => out.touches.push(Crossing {
                            time: times[r],
                            breakpoint: b,
                            direction: 0,
                        }),
                        None => {}
                    }
                }
            } else if let Some((li, ls)) = last_nonzero {
                if ls != sign {
                    push_crossing(li, j, sign > 0.0, &mut crossings_here);
                }
            }
            last_nonzero = Some((j, sign));
        }
        if let Some(r) = run_start {
            if last_index + 1 - r >= 2 {
                out.plateaus.push(Plateau {
                    breakpoint: b,
                    start: times[r],
                    end: times[last_index],
                });
            }
        }
        for w in crossings_here.windows(2) {
            if w[0].0 == w[1].0 {
                let cell = w[0].0;
                return Err(Error::GridTooCoarse {
                    breakpoint: b,
                    start: times[2 * cell],
                    end: times[(2 * cell + 2).min(last_index)],
                });
            }
        }
        out.crossings.extend(crossings_here.into_iter().map(|(_, c)| c));
    }
    out.crossings.sort_by(|a, b| a.time.total_cmp(&b.time));
    out.touches.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(out)
}

/// Root of `q - b` in `[lo, hi]`, where `q(lo) - b` has sign `-1` when `rising`.
fn bisect(q: &dyn Fn(f64) -> f64, b: f64, mut lo: f64, mut hi: f64, rising: bool) -> f64 {
    for _ in 0..BISECTION_MAX_ITER {
        if hi - lo <= BISECTION_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let fm = q(mid) - b;
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == rising {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Levels and switching times of one control channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelWaveform {
    /// `s_0, …, s_K`: the level held on each inter-switching interval.
    pub levels: Vec<f64>,
    /// `t_1 < … < t_K`, strictly inside `(0, T)`.
    pub switch_times: Vec<f64>,
    /// Index of each level in the channel's slope list.
    pub segment_indices: Vec<usize>,
}

impl ChannelWaveform {
    pub fn constant(level: f64, segment: usize) -> Self {
        Self {
            levels: vec![level],
            switch_times: Vec::new(),
            segment_indices: vec![segment],
        }
    }

    pub fn level_at(&self, t: f64) -> f64 {
        self.levels[self.switch_times.partition_point(|&s| s <= t)]
    }

    pub fn switch_count(&self) -> usize {
        self.switch_times.len()
    }
}

/// A piecewise-constant control with finitely many jumps, one waveform per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultilevelControl {
    pub horizon: f64,
    pub channels: Vec<ChannelWaveform>,
    /// Factor applied to the slopes (`Λ` for Fabre kinds, 1 otherwise).
    pub scale: f64,
}

impl MultilevelControl {
    pub fn new(horizon: f64, channels: Vec<ChannelWaveform>, scale: f64) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Dimension("control needs at least one channel".into()));
        }
        for (k, ch) in channels.iter().enumerate() {
            if ch.levels.len() != ch.switch_times.len() + 1
                || ch.segment_indices.len() != ch.levels.len()
            {
                return Err(Error::Dimension(format!(
                    "channel {k}: {} levels for {} switching times",
                    ch.levels.len(),
                    ch.switch_times.len()
                )));
            }
            let inside = ch.switch_times.iter().all(|&t| t > 0.0 && t < horizon);
            if !inside || ch.switch_times.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Domain(format!(
                    "channel {k}: switching times must increase strictly inside (0, {horizon})"
                )));
            }
        }
        Ok(Self {
            horizon,
            channels,
            scale,
        })
    }

    /// Distinct level values used on any channel.
    pub fn distinct_levels(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self
            .channels
            .iter()
            .flat_map(|c| c.levels.iter().copied())
            .collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }
}

impl ControlSignal for MultilevelControl {
    fn channels(&self) -> usize {
        self.channels.len()
    }

    fn knots(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self
            .channels
            .iter()
            .flat_map(|c| c.switch_times.iter().copied())
            .collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }

    fn on_interval(&self, start: f64, end: f64) -> (DVector<f64>, DVector<f64>) {
        let v = self.value(0.5 * (start + end));
        (v.clone(), v)
    }

    fn value(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(self.channels.len(), self.channels.iter().map(|c| c.level_at(t)))
    }
}

/// The multilevel control `Λ·ℒ'(Bᵀp*(t))` of a converged solve, using the
/// default bracketing density.
pub fn extract_control(p_star: &DVector<f64>, prob: &DualProblem) -> Result<MultilevelControl> {
    extract_control_with(p_star, prob, DEFAULT_BRACKET_REFINEMENT)
}

/// [`extract_control`] with an explicit bracketing refinement factor.
pub fn extract_control_with(
    p_star: &DVector<f64>,
    prob: &DualProblem,
    bracket_refinement: usize,
) -> Result<MultilevelControl> {
    if prob.kind().is_quadratic() {
        return Err(Error::Unsupported(
            "quadratic functionals produce continuous controls".into(),
        ));
    }
    let sys = prob.system();
    if p_star.len() != sys.state_dim() {
        return Err(Error::Dimension(format!(
            "adjoint datum has length {}, expected {}",
            p_star.len(),
            sys.state_dim()
        )));
    }
    let horizon = sys.horizon();
    let cells = (prob.quadrature().len() - 1) * bracket_refinement.max(1);
    let grid = lti::uniform_grid(horizon, cells + 1);
    let times = bracket_samples(&grid);
    let kernel = lti::input_kernel(sys, &times)?;
    let scale = prob.control_scale(p_star)?;
    let at_transpose = sys.a().transpose();
    let adjoint_output = |t: f64| -> DVector<f64> {
        let p = lti::mat_exp(&at_transpose, horizon - t).expect("square") * p_star;
        sys.b().tr_mul(&p)
    };

    let mut channels = Vec::with_capacity(sys.channels());
    for (k, l) in prob.penalizations().iter().enumerate() {
        let values: Vec<f64> = kernel.iter().map(|phi| phi.column(k).dot(p_star)).collect();
        let qk = |t: f64| adjoint_output(t)[k];
        let sw = find_switchings_sampled(&qk, &times, &values, l.breakpoints())?;
        if let Some(pl) = sw.plateaus.first() {
            return Err(Error::DegenerateAdjoint {
                channel: k,
                breakpoint: pl.breakpoint,
                start: pl.start,
                end: pl.end,
            });
        }
        let slopes = l.slopes();
        let mut edges = vec![0.0];
        edges.extend(sw.crossings.iter().map(|c| c.time));
        edges.push(horizon);
        let mut wave = ChannelWaveform {
            levels: Vec::new(),
            switch_times: Vec::new(),
            segment_indices: Vec::new(),
        };
        for (j, w) in edges.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                continue;
            }
            let idx = l.segment_index(qk(0.5 * (w[0] + w[1])));
            let level = scale * slopes[idx];
            if wave.levels.last() == Some(&level) {
                continue;
            }
            if !wave.levels.is_empty() {
                wave.switch_times.push(edges[j]);
            }
            wave.levels.push(level);
            wave.segment_indices.push(idx);
        }
        channels.push(wave);
    }
    MultilevelControl::new(horizon, channels, scale)
}

/// A channel whose adjoint output sits on one breakpoint over the whole horizon.
#[derive(Debug, Clone, Copy)]
struct FlatChannel {
    channel: usize,
    low: f64,
    high: f64,
    low_index: usize,
}

/// Multilevel control for a converged solve whose adjoint output is flat.
///
/// When `Bᵀp*` stays on a breakpoint `b` of channel `k` over all of `[0, T]`
/// (typically `p* = 0`), the optimality condition only requires
/// `u_k(t) ∈ Λ·∂ℒ(b) = Λ·[σ_j, σ_{j+1}]`. This picks an extreme-point selection:
/// a waveform alternating between the two adjacent levels whose switching
/// times are fitted by Gauss–Newton so that the terminal state vanishes.
/// Channels with a transversal adjoint keep their extracted waveform.
/// Falls back to [`extract_control_with`] when no channel is flat.
pub fn extract_control_resolving(
    p_star: &DVector<f64>,
    prob: &DualProblem,
    bracket_refinement: usize,
) -> Result<MultilevelControl> {
    match extract_control_with(p_star, prob, bracket_refinement) {
        Err(Error::DegenerateAdjoint { .. }) => {}
        other => return other,
    }
    let sys = prob.system();
    let horizon = sys.horizon();
    let scale = prob.control_scale(p_star)?;
    let q = prob.adjoint_outputs(p_star)?;
    let mut flat = Vec::new();
    let mut fixed: Vec<Option<ChannelWaveform>> = vec![None; sys.channels()];
    for (k, l) in prob.penalizations().iter().enumerate() {
        let on = l.breakpoints().iter().position(|&b| {
            let tol = ON_BREAKPOINT_TOL * (1.0 + b.abs());
            q.iter().all(|v| (v[k] - b).abs() <= tol)
        });
        match on {
            Some(j) => flat.push(FlatChannel {
                channel: k,
                low: scale * l.slopes()[j],
                high: scale * l.slopes()[j + 1],
                low_index: j,
            }),
            None => {
                let single = single_channel(prob, k)?;
                let wave = extract_control_with(p_star, &single, bracket_refinement)?;
                fixed[k] = Some(wave.channels[0].clone());
            }
        }
    }
    let target = sys.x0().norm().max(1.0) * 1e-12;
    let n = sys.state_dim();
    let max_switches = n + 8;
    for switches in n.div_ceil(flat.len())..=max_switches {
        for start_mask in 0..(1usize << flat.len()) {
            let mut times: Vec<Vec<f64>> = flat
                .iter()
                .map(|_| {
                    (1..=switches)
                        .map(|j| horizon * j as f64 / (switches + 1) as f64)
                        .collect()
                })
                .collect();
            let starts: Vec<bool> = (0..flat.len()).map(|c| start_mask >> c & 1 == 1).collect();
            if fit_switch_times(prob, &flat, &starts, &fixed, &mut times, target)? {
                let mut channels = Vec::with_capacity(sys.channels());
                let mut flat_iter = flat.iter().zip(&starts).zip(&times);
                for slot in fixed.iter_mut() {
                    if let Some(w) = slot.take() {
                        channels.push(w);
                    } else {
                        let ((fc, &high_first), t) = flat_iter.next().expect("one per flat channel");
                        channels.push(alternating_waveform(fc, high_first, t));
                    }
                }
                log::info!("flat adjoint resolved with {switches} switches per channel");
                return MultilevelControl::new(horizon, channels, scale);
            }
        }
    }
    let first = flat[0];
    Err(Error::DegenerateAdjoint {
        channel: first.channel,
        breakpoint: prob.penalizations()[first.channel].breakpoints()[first.low_index],
        start: 0.0,
        end: horizon,
    })
}

fn single_channel(prob: &DualProblem, k: usize) -> Result<DualProblem> {
    let sys = prob.system();
    let b = sys.b().columns(k, 1).into_owned();
    let single = lti::LtiSystem::new(sys.a().clone(), b, sys.x0().clone(), sys.horizon())?;
    DualProblem::new(
        single,
        vec![prob.base_penalizations()[k].clone()],
        prob.kind(),
        prob.quadrature().clone(),
        *prob.optimizer(),
    )
}

fn alternating_waveform(fc: &FlatChannel, high_first: bool, times: &[f64]) -> ChannelWaveform {
    let mut levels = Vec::with_capacity(times.len() + 1);
    let mut indices = Vec::with_capacity(times.len() + 1);
    for j in 0..=times.len() {
        let high = high_first == (j % 2 == 0);
        levels.push(if high { fc.high } else { fc.low });
        indices.push(fc.low_index + usize::from(high));
    }
    ChannelWaveform {
        levels,
        switch_times: times.to_vec(),
        segment_indices: indices,
    }
}

/// Terminal state under the fixed waveforms plus the alternating ones.
fn terminal_state(
    prob: &DualProblem,
    flat: &[FlatChannel],
    starts: &[bool],
    fixed: &[Option<ChannelWaveform>],
    times: &[Vec<f64>],
) -> Result<DVector<f64>> {
    let sys = prob.system();
    let horizon = sys.horizon();
    let mut channels = Vec::with_capacity(sys.channels());
    let mut flat_iter = flat.iter().zip(starts).zip(times);
    for f in fixed {
        match f {
            Some(w) => channels.push(w.clone()),
            None => {
                let ((fc, &hf), t) = flat_iter.next().expect("one per flat channel");
                channels.push(alternating_waveform(fc, hf, t));
            }
        }
    }
    let ctrl = MultilevelControl {
        horizon,
        channels,
        scale: 1.0,
    };
    let traj = lti::simulate_forward(sys, &ctrl, &[0.0, horizon])?;
    Ok(traj.terminal().clone())
}

/// Gauss–Newton with minimum-norm steps on the switching times; keeps the
/// times strictly ordered inside `(0, T)`. Returns whether the terminal
/// residual reached `target`.
fn fit_switch_times(
    prob: &DualProblem,
    flat: &[FlatChannel],
    starts: &[bool],
    fixed: &[Option<ChannelWaveform>],
    times: &mut [Vec<f64>],
    target: f64,
) -> Result<bool> {
    let sys = prob.system();
    let horizon = sys.horizon();
    let unknowns: usize = times.iter().map(Vec::len).sum();
    let mut residual = terminal_state(prob, flat, starts, fixed, times)?;
    let min_gap = 1e-9 * horizon;
    for _ in 0..200 {
        let norm = residual.norm();
        if norm <= target {
            return Ok(true);
        }
        // Moving switch j later extends the level before it.
        let mut jac = nalgebra::DMatrix::<f64>::zeros(sys.state_dim(), unknowns);
        let mut col = 0;
        for ((fc, &hf), t) in flat.iter().zip(starts).zip(times.iter()) {
            for (j, &tj) in t.iter().enumerate() {
                let before_high = hf == (j % 2 == 0);
                let jump = if before_high { fc.high - fc.low } else { fc.low - fc.high };
                let phi = lti::mat_exp(sys.a(), horizon - tj)? * sys.b().column(fc.channel);
                jac.set_column(col, &(phi * jump));
                col += 1;
            }
        }
        let svd = jac.svd(true, true);
        let step = svd
            .solve(&(-&residual), 1e-12)
            .map_err(|e| Error::Numerical(e.to_string()))?;
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let mut trial: Vec<Vec<f64>> = times.to_vec();
            let mut idx = 0;
            for t in trial.iter_mut() {
                for tj in t.iter_mut() {
                    *tj += alpha * step[idx];
                    idx += 1;
                }
            }
            let ordered = trial.iter().all(|t| {
                t.first().is_none_or(|&a| a > min_gap)
                    && t.last().is_none_or(|&b| b < horizon - min_gap)
                    && t.windows(2).all(|w| w[1] - w[0] > min_gap)
            });
            if ordered {
                let r = terminal_state(prob, flat, starts, fixed, &trial)?;
                if r.norm() < norm {
                    for (dst, src) in times.iter_mut().zip(trial) {
                        *dst = src;
                    }
                    residual = r;
                    improved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !improved {
            return Ok(false);
        }
    }
    Ok(residual.norm() <= target)
}

/// Admissible levels per channel: the slopes of each effective penalization times `scale`.
pub fn level_sets(prob: &DualProblem, scale: f64) -> Vec<Vec<f64>> {
    prob.penalizations()
        .iter()
        .map(|l| l.slopes().iter().map(|s| scale * s).collect())
        .collect()
}

/// First place where a control jumps between non-adjacent levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaircaseViolation {
    pub channel: usize,
    pub switch_index: usize,
    pub time: f64,
    pub from: f64,
    pub to: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaircaseVerdict {
    pub valid: bool,
    pub first_violation: Option<StaircaseViolation>,
}

/// Checks that every channel only jumps between consecutive elements of `levels`.
pub fn verify_staircase(ctrl: &MultilevelControl, levels: &[f64]) -> Result<StaircaseVerdict> {
    let sets = vec![levels.to_vec(); ctrl.channels.len()];
    verify_staircase_per_channel(ctrl, &sets)
}

/// [`verify_staircase`] with one level set per channel.
pub fn verify_staircase_per_channel(
    ctrl: &MultilevelControl,
    level_sets: &[Vec<f64>],
) -> Result<StaircaseVerdict> {
    if level_sets.len() != ctrl.channels.len() {
        return Err(Error::Dimension(format!(
            "{} level sets for {} channels",
            level_sets.len(),
            ctrl.channels.len()
        )));
    }
    for (k, (ch, set)) in ctrl.channels.iter().zip(level_sets).enumerate() {
        if set.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain("level set must be sorted and distinct".into()));
        }
        let index_of = |v: f64| -> Result<usize> {
            set.iter()
                .position(|&r| (r - v).abs() <= 1e-12 * (1.0 + r.abs()))
                .ok_or(Error::NotALevel { level: v })
        };
        let indices = ch
            .levels
            .iter()
            .map(|&v| index_of(v))
            .collect::<Result<Vec<_>>>()?;
        for (j, w) in indices.windows(2).enumerate() {
            if w[0].abs_diff(w[1]) != 1 {
                return Ok(StaircaseVerdict {
                    valid: false,
                    first_violation: Some(StaircaseViolation {
                        channel: k,
                        switch_index: j,
                        time: ch.switch_times[j],
                        from: ch.levels[j],
                        to: ch.levels[j + 1],
                    }),
                });
            }
        }
    }
    Ok(StaircaseVerdict {
        valid: true,
        first_violation: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn sine_crosses_zero_at_pi() {
        let sw = find_switchings(&|t: f64| t.sin(), &[0.0], &grid(0.0, 2.0 * PI, 101)).unwrap();
        assert_eq!(sw.crossings.len(), 1);
        assert!((sw.crossings[0].time - PI).abs() < 1e-12);
        assert_eq!(sw.crossings[0].direction, -1);
    }

    #[test]
    fn monotone_crosses_each_breakpoint_once() {
        let sw = find_switchings(&|t: f64| 2.0 * t - 1.0, &[-0.5, 0.0, 0.5], &grid(0.0, 1.0, 37)).unwrap();
        let times: Vec<f64> = sw.crossings.iter().map(|c| c.time).collect();
        assert_eq!(times.len(), 3);
        for (t, e) in times.iter().zip([0.25, 0.5, 0.75]) {
            assert!((t - e).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_inside_segment_has_no_switch() {
        let sw = find_switchings(&|_| 0.2, &[-0.5, 0.0, 0.5], &grid(0.0, 1.0, 11)).unwrap();
        assert!(sw.crossings.is_empty() && sw.touches.is_empty() && sw.plateaus.is_empty());
    }

    #[test]
    fn touch_is_not_a_switch() {
        let sw = find_switchings(&|t: f64| (t - 0.5) * (t - 0.5), &[0.0], &grid(0.0, 1.0, 11)).unwrap();
        assert!(sw.crossings.is_empty());
        assert_eq!(sw.touches.len(), 1);
        assert!((sw.touches[0].time - 0.5).abs() < 1e-15);
    }

    #[test]
    fn double_crossing_in_one_cell_is_reported() {
        // Roots at 0.45 and 0.55 share the only bracketing cell.
        let q = |t: f64| (t - 0.45) * (t - 0.55);
        let err = find_switchings(&q, &[0.0], &[0.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::GridTooCoarse { .. }));
        // A fine grid resolves both.
        let sw = find_switchings(&q, &[0.0], &grid(0.0, 1.0, 101)).unwrap();
        assert_eq!(sw.crossings.len(), 2);
    }

    #[test]
    fn endpoint_roots_are_excluded() {
        let sw = find_switchings(&|t: f64| t, &[0.0], &grid(0.0, 1.0, 11)).unwrap();
        assert!(sw.crossings.is_empty());
    }

    fn ctrl(levels: &[f64], times: &[f64]) -> MultilevelControl {
        MultilevelControl::new(
            1.0,
            vec![ChannelWaveform {
                levels: levels.to_vec(),
                switch_times: times.to_vec(),
                segment_indices: vec![0; levels.len()],
            }],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn staircase_examples() {
        let r = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let bad = verify_staircase(&ctrl(&[-0.5, 1.0], &[0.5]), &r).unwrap();
        assert!(!bad.valid);
        assert_eq!(bad.first_violation.unwrap().to, 1.0);
        let good = verify_staircase(&ctrl(&[-0.5, 0.0, 0.5, 0.0], &[0.2, 0.4, 0.6]), &r).unwrap();
        assert!(good.valid);
        assert!(verify_staircase(&ctrl(&[0.5], &[]), &r).unwrap().valid);
        assert!(matches!(
            verify_staircase(&ctrl(&[0.3], &[]), &r),
            Err(Error::NotALevel { .. })
        ));
    }

    #[test]
    fn control_signal_values() {
        let c = ctrl(&[1.0, -1.0], &[0.25]);
        assert_eq!(c.value(0.1)[0], 1.0);
        assert_eq!(c.value(0.25)[0], -1.0);
        assert_eq!(c.knots(), vec![0.25]);
    }

    fn oscillator_problem(horizon: f64, x0: [f64; 2], kind: crate::dual::FunctionalKind) -> DualProblem {
        use crate::dual::{OptimizerSettings, Quadrature};
        use crate::lti::LtiSystem;
        use crate::pwl::{build_penalization, ConvexProfile, Partition};
        use nalgebra::DMatrix;
        let sys = LtiSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DVector::from_row_slice(&x0),
            horizon,
        )
        .unwrap();
        let l = build_penalization(&ConvexProfile::quadratic(), &Partition::uniform(-1.0, 1.0, 4).unwrap()).unwrap();
        DualProblem::new(sys, vec![l], kind, Quadrature::uniform(horizon, 4000).unwrap(), OptimizerSettings::default()).unwrap()
    }

    #[test]
    fn oscillator_control_reaches_zero() {
        let prob = oscillator_problem(4.0, [-1.0, 0.5], crate::dual::FunctionalKind::Jml);
        let report = crate::dual::minimize(&prob).unwrap();
        assert!(matches!(
            extract_control(&report.p_star, &prob),
            Err(Error::DegenerateAdjoint { .. })
        ));
        let c = extract_control_resolving(&report.p_star, &prob, DEFAULT_BRACKET_REFINEMENT).unwrap();
        let levels = [-1.5, -0.5, 0.5, 1.5];
        assert!(c.distinct_levels().iter().all(|l| levels.contains(l)));
        assert!(verify_staircase(&c, &levels).unwrap().valid);
        let traj = lti::simulate_forward(prob.system(), &c, prob.quadrature().times()).unwrap();
        assert!(traj.terminal().norm() < 1e-10, "{}", traj.terminal().norm());
        assert_eq!(c.distinct_levels(), vec![-0.5, 0.5]);
    }
}
