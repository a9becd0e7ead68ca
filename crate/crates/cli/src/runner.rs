//! Scenario execution: solve, extract, simulate, check.

use std::time::Instant;

use multilevel_core::dual::{minimize, DualProblem, FunctionalKind, SolveReport, SolveStatus};
use multilevel_core::extract::{
    extract_control_resolving, extract_control_with, level_sets, verify_staircase_per_channel,
    MultilevelControl, StaircaseVerdict,
};
use multilevel_core::fenchel::{
    duality_gap, l2_distance, nodewise_optimality, solve_primal, DiscretePrimal,
};
use multilevel_core::lti::{kalman_rank, simulate_forward, uniform_grid, ControlSignal, Trajectory};
use multilevel_core::solvable::{solvable_bound_scaled, SolvableBoundReport};
use multilevel_core::Error;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::{Expectation, ExperimentConfig};
use crate::error::{exit, CliError};

/// The synthesized control in serializable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum ControlRecord {
    Multilevel(MultilevelControl),
    /// Continuous control of the quadratic kinds, linear between samples.
    Sampled { times: Vec<f64>, values: Vec<Vec<f64>> },
}

impl ControlRecord {
    pub fn signal(&self) -> Result<Box<dyn ControlSignal>, Error> {
        match self {
            Self::Multilevel(c) => Ok(Box::new(c.clone())),
            Self::Sampled { times, values } => Ok(Box::new(multilevel_core::lti::PiecewiseLinear::new(
                times.clone(),
                values.iter().map(|v| DVector::from_vec(v.clone())).collect(),
            )?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub status: SolveStatus,
    pub p_star: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub subgradient_norm: f64,
    pub certified_at_kink: bool,
}

impl From<&SolveReport> for SolveSummary {
    fn from(r: &SolveReport) -> Self {
        Self {
            status: r.status,
            p_star: r.p_star.iter().copied().collect(),
            value: r.value,
            iterations: r.iterations,
            subgradient_norm: r.subgradient_norm,
            certified_at_kink: r.certificate.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FenchelSummary {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    pub relative_gap: f64,
    /// Discrete `L²` distance between the primal and the extracted control.
    pub distance: f64,
    pub relative_distance: f64,
    pub nodewise_fraction: f64,
    /// Terminal norm reached by the node-interpolated primal control.
    pub primal_terminal_norm: f64,
    pub primal_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub solve_secs: f64,
    pub extract_secs: f64,
    pub simulate_secs: f64,
    pub fenchel_secs: f64,
    pub total_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub kind: FunctionalKind,
    pub kalman_rank: usize,
    pub solve: SolveSummary,
    pub control: Option<ControlRecord>,
    /// The adjoint output sat on a breakpoint throughout, and the control is
    /// an extreme selection of the subdifferential.
    pub flat_adjoint: bool,
    pub terminal_norm: Option<f64>,
    pub distinct_levels: Vec<f64>,
    pub staircase: Option<StaircaseVerdict>,
    pub fenchel: Option<FenchelSummary>,
    pub solvable: Option<SolvableBoundReport>,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
    pub exit_code: i32,
    pub timings: Timings,
    #[serde(skip)]
    pub trajectory: Option<Trajectory>,
    #[serde(skip)]
    pub trace: Vec<multilevel_core::dual::IterationRecord>,
}

/// Everything needed to solve a configured scenario.
pub struct Setup {
    pub problem: DualProblem,
    pub trajectory_grid: Vec<f64>,
}

pub fn setup(cfg: &ExperimentConfig) -> Result<Setup, CliError> {
    let sys = cfg.build_system()?;
    let pens = cfg.build_penalizations(sys.channels())?;
    let quad = cfg.quadrature()?;
    if cfg.grid.trajectory_samples < 2 {
        return Err(CliError::Config("grid.trajectory_samples: need at least 2".into()));
    }
    if cfg.grid.bracket_refinement == 0 {
        return Err(CliError::Config("grid.bracket_refinement: must be positive".into()));
    }
    let trajectory_grid = uniform_grid(sys.horizon(), cfg.grid.trajectory_samples);
    let problem = DualProblem::new(sys, pens, cfg.functional, quad, cfg.optimizer.settings())
        .map_err(|e| match e {
            Error::Domain(m) | Error::Dimension(m) | Error::Precondition(m) => {
                CliError::Config(format!("functional: {m}"))
            }
            other => CliError::Core(other),
        })?;
    Ok(Setup {
        problem,
        trajectory_grid,
    })
}

/// Extracted control for a solved problem; `true` when the flat-adjoint selection was used.
pub fn synthesize(
    prob: &DualProblem,
    p_star: &DVector<f64>,
    refinement: usize,
) -> Result<(ControlRecord, bool), Error> {
    if prob.kind().is_quadratic() {
        let times = prob.quadrature().times().to_vec();
        let ctrl = prob.quadratic_control(p_star)?;
        let values = times.iter().map(|&t| ctrl.value(t).iter().copied().collect()).collect();
        return Ok((ControlRecord::Sampled { times, values }, false));
    }
    match extract_control_with(p_star, prob, refinement) {
        Ok(c) => Ok((ControlRecord::Multilevel(c), false)),
        Err(Error::DegenerateAdjoint { .. }) => {
            let c = extract_control_resolving(p_star, prob, refinement)?;
            Ok((ControlRecord::Multilevel(c), true))
        }
        Err(e) => Err(e),
    }
}

fn check(checks: &mut Vec<CheckResult>, name: &str, passed: bool, detail: String) {
    checks.push(CheckResult {
        name: name.to_string(),
        passed,
        detail,
    });
}

/// Runs minimize → extract → simulate → verify, plus the optional duality
/// and solvable-set checks, and decides the exit code.
pub fn run_scenario(cfg: &ExperimentConfig) -> Result<ExperimentReport, CliError> {
    let start = Instant::now();
    let Setup {
        problem: prob,
        trajectory_grid,
    } = setup(cfg)?;
    let sys = prob.system();
    let rank = kalman_rank(sys.a(), sys.b())?;
    if rank < sys.state_dim() {
        log::warn!("{}: Kalman rank {rank} < {}", cfg.name, sys.state_dim());
    }
    let mut timings = Timings::default();

    let t = Instant::now();
    let report = minimize(&prob)?;
    timings.solve_secs = t.elapsed().as_secs_f64();
    log::info!(
        "{}: {:?} after {} iterations, J = {:.6e}",
        cfg.name,
        report.status,
        report.iterations,
        report.value
    );

    let mut control = None;
    let mut flat_adjoint = false;
    let mut trajectory = None;
    let mut terminal_norm = None;
    let mut staircase = None;
    let mut distinct = Vec::new();
    let mut checks = Vec::new();
    let converged = report.status == SolveStatus::Converged;
    let scale = prob.control_scale(&report.p_star)?;

    if report.status != SolveStatus::Diverged {
        let t = Instant::now();
        match synthesize(&prob, &report.p_star, cfg.grid.bracket_refinement) {
            Ok((c, flat)) => {
                control = Some(c);
                flat_adjoint = flat;
            }
            Err(e) => check(&mut checks, "extraction", false, e.to_string()),
        }
        timings.extract_secs = t.elapsed().as_secs_f64();
    }

    if let Some(rec) = &control {
        let t = Instant::now();
        let signal = rec.signal()?;
        let traj = simulate_forward(sys, signal.as_ref(), &trajectory_grid)?;
        terminal_norm = Some(traj.terminal().norm());
        trajectory = Some(traj);
        timings.simulate_secs = t.elapsed().as_secs_f64();
        if let ControlRecord::Multilevel(ml) = rec {
            distinct = ml.distinct_levels();
            let sets = level_sets(&prob, scale);
            match verify_staircase_per_channel(ml, &sets) {
                Ok(v) => staircase = Some(v),
                Err(e) => check(&mut checks, "staircase", false, e.to_string()),
            }
        }
    }

    match cfg.checks.expect {
        Expectation::Controlled => {
            check(
                &mut checks,
                "converged",
                converged,
                format!("status {:?}", report.status),
            );
            let ok = terminal_norm.is_some_and(|n| n <= cfg.checks.terminal_tolerance);
            check(
                &mut checks,
                "terminal",
                ok,
                format!("‖x(T)‖ = {terminal_norm:?} vs {:.1e}", cfg.checks.terminal_tolerance),
            );
        }
        Expectation::Uncontrolled => {
            let diverged = report.status == SolveStatus::Diverged;
            let far = terminal_norm.is_some_and(|n| n > cfg.checks.failure_threshold);
            check(
                &mut checks,
                "uncontrolled",
                diverged || far,
                format!("status {:?}, ‖x(T)‖ = {terminal_norm:?}", report.status),
            );
        }
        Expectation::Diverged => {
            check(
                &mut checks,
                "diverged",
                report.status == SolveStatus::Diverged,
                format!("status {:?}, ‖p‖ = {:.3e}", report.status, report.p_star.norm()),
            );
        }
    }

    if cfg.checks.staircase && cfg.checks.expect == Expectation::Controlled && !prob.kind().is_quadratic() {
        let ok = staircase.is_some_and(|v| v.valid);
        check(&mut checks, "staircase", ok, format!("{staircase:?}"));
    }

    if let (Some(allowed), Some(ControlRecord::Multilevel(ml))) = (&cfg.checks.levels, &control) {
        let outside: Vec<f64> = ml
            .distinct_levels()
            .into_iter()
            .filter(|l| !allowed.iter().any(|a| (a - l).abs() <= 1e-12 * (1.0 + a.abs())))
            .collect();
        check(
            &mut checks,
            "levels",
            outside.is_empty(),
            format!("levels outside the admissible set: {outside:?}"),
        );
    }

    let controlled = converged
        && terminal_norm.is_some_and(|n| n <= cfg.checks.terminal_tolerance);

    let mut solvable = None;
    if cfg.checks.solvable && sys.channels() == 1 && !prob.kind().is_quadratic() {
        let r = solvable_bound_scaled(sys, &prob.penalizations()[0], scale, cfg.grid.gram_nodes)?;
        if controlled {
            check(
                &mut checks,
                "solvable-necessity",
                r.passes,
                format!("‖x0‖ = {:.6} vs bound {:.6}", r.x0_norm, r.bound),
            );
        }
        solvable = Some(r);
    }

    let mut fenchel = None;
    if cfg.checks.fenchel {
        let t = Instant::now();
        match fenchel_checks(cfg, &prob, &report, control.as_ref()) {
            Ok(summary) => {
                check(
                    &mut checks,
                    "duality-gap",
                    summary.relative_gap <= cfg.checks.gap_tolerance,
                    format!("|P + J| / (1 + |P|) = {:.3e}", summary.relative_gap),
                );
                check(
                    &mut checks,
                    "primal-dual-distance",
                    summary.relative_distance <= cfg.checks.distance_tolerance,
                    format!("‖v* - u*‖ / ‖u*‖ = {:.4}", summary.relative_distance),
                );
                check(
                    &mut checks,
                    "nodewise-optimality",
                    summary.nodewise_fraction >= cfg.checks.nodewise_fraction,
                    format!("fraction {:.5}", summary.nodewise_fraction),
                );
                let feas = cfg.checks.primal_feasibility * (1.0 + sys.x0().norm());
                check(
                    &mut checks,
                    "primal-feasibility",
                    summary.primal_terminal_norm <= feas,
                    format!("‖x(T)‖ = {:.3e} under v*", summary.primal_terminal_norm),
                );
                fenchel = Some(summary);
            }
            Err(e) => check(&mut checks, "fenchel", false, e.to_string()),
        }
        timings.fenchel_secs = t.elapsed().as_secs_f64();
    }

    timings.total_secs = start.elapsed().as_secs_f64();
    if let Some(limit) = cfg.checks.max_runtime_secs {
        check(
            &mut checks,
            "runtime",
            timings.solve_secs + timings.extract_secs + timings.simulate_secs <= limit,
            format!(
                "synthesis {:.3} s vs {limit} s",
                timings.solve_secs + timings.extract_secs + timings.simulate_secs
            ),
        );
    }

    let passed = checks.iter().all(|c| c.passed);
    let divergence_expected = matches!(
        cfg.checks.expect,
        Expectation::Diverged | Expectation::Uncontrolled
    );
    let exit_code = if report.status == SolveStatus::Diverged && !divergence_expected {
        exit::DIVERGED
    } else if passed {
        exit::PASS
    } else {
        exit::CHECKS_FAILED
    };

    Ok(ExperimentReport {
        name: cfg.name.clone(),
        kind: cfg.functional,
        kalman_rank: rank,
        solve: SolveSummary::from(&report),
        control,
        flat_adjoint,
        terminal_norm,
        distinct_levels: distinct,
        staircase,
        fenchel,
        solvable,
        checks,
        passed,
        exit_code,
        timings,
        trajectory,
        trace: report.trace,
    })
}

fn fenchel_checks(
    cfg: &ExperimentConfig,
    prob: &DualProblem,
    report: &SolveReport,
    control: Option<&ControlRecord>,
) -> Result<FenchelSummary, CliError> {
    let Some(control) = control else {
        return Err(CliError::Core(Error::Precondition(
            "duality checks need an extracted control".into(),
        )));
    };
    let dp = DiscretePrimal::new(prob)?;
    let sol = solve_primal(&dp, &cfg.checks.primal)?;
    let gap = duality_gap(&sol, &report.p_star, prob)?;
    let nodewise = nodewise_optimality(&sol, &report.p_star, prob, cfg.checks.nodewise_slack)?;
    let primal_ctrl = sol.control(dp.times())?;
    let dual_ctrl = control.signal()?;
    let distance = l2_distance(prob, &|t| primal_ctrl.value(t), &|t| dual_ctrl.value(t));
    let k = prob.system().channels();
    let reference = l2_distance(prob, &|_| DVector::zeros(k), &|t| dual_ctrl.value(t));
    let traj = simulate_forward(prob.system(), &primal_ctrl, &[0.0, prob.system().horizon()])?;
    Ok(FenchelSummary {
        primal: gap.primal,
        dual: gap.dual,
        gap: gap.gap,
        relative_gap: gap.gap.abs() / (1.0 + gap.primal.abs()),
        distance,
        relative_distance: if reference > 0.0 { distance / reference } else { distance },
        nodewise_fraction: nodewise,
        primal_terminal_norm: traj.terminal().norm(),
        primal_iterations: sol.iterations,
    })
}

/// [`run_scenario`] for the two-channel setting; rejects other channel counts.
pub fn run_two_channel(cfg: &ExperimentConfig) -> Result<ExperimentReport, CliError> {
    let k = cfg.system.b.first().map_or(0, Vec::len);
    if k != 2 {
        return Err(CliError::Config(format!(
            "system.b: two-channel run needs 2 columns, got {k}"
        )));
    }
    run_scenario(cfg)
}
