//! Multilevel controls against the quadratic-penalty control as the partition is refined.

use multilevel_core::dual::{eval_functional, minimize, FunctionalKind, SolveStatus};
use multilevel_core::fenchel::l2_distance;
use multilevel_core::lti::ControlSignal;
use multilevel_core::pwl::interp_error_bound;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ProfileName};
use crate::error::CliError;
use crate::runner::{setup, synthesize, ControlRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub segments: usize,
    pub spacing: f64,
    pub ml_status: SolveStatus,
    pub l2_status: SolveStatus,
    /// Discrete `L²(0,T)` distance between the multilevel and the quadratic-penalty control.
    pub distance: Option<f64>,
    pub relative_distance: Option<f64>,
    pub distinct_levels: usize,
    pub flat_adjoint: bool,
    /// Largest `|J_ml(p) - J_2(p)|` over the random sample.
    pub max_functional_difference: f64,
    /// `K·(h²/2)·max𝒫''·T`.
    pub functional_bound: f64,
    pub bound_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub name: String,
    pub rows: Vec<ConvergenceRow>,
    pub distances_strictly_decreasing: bool,
}

/// Solves the `Jml` and `J2` problems of `cfg` for each uniform partition size
/// and compares controls and functionals. `samples` random adjoint data with
/// outputs inside the partition interval are drawn from `seed`.
pub fn convergence_study(
    cfg: &ExperimentConfig,
    sizes: &[usize],
    samples: usize,
    seed: u64,
) -> Result<ConvergenceTable, CliError> {
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::Config("sizes: must be strictly increasing".into()));
    }
    if cfg.penalization.iter().any(|p| p.profile != ProfileName::Quadratic) {
        return Err(CliError::Config(
            "penalization.profile: the convergence study compares against u², use \"quadratic\"".into(),
        ));
    }
    let mut l2_cfg = cfg.clone();
    l2_cfg.functional = FunctionalKind::J2;
    let l2_prob = setup(&l2_cfg)?.problem;
    let l2_report = minimize(&l2_prob)?;
    let l2_ctrl = if l2_report.status == SolveStatus::Converged {
        Some(l2_prob.quadratic_control(&l2_report.p_star)?)
    } else {
        None
    };
    let channels = l2_prob.system().channels();
    let horizon = l2_prob.system().horizon();

    let mut rows = Vec::with_capacity(sizes.len());
    for &m in sizes {
        let mut ml_cfg = cfg.clone();
        ml_cfg.functional = FunctionalKind::Jml;
        ml_cfg.penalization = cfg
            .penalization
            .iter()
            .map(|p| p.with_segments(m))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Config(format!("penalization: {e}")))?;
        let prob = setup(&ml_cfg)?.problem;
        let report = minimize(&prob)?;

        let mut distance = None;
        let mut relative = None;
        let mut distinct = 0;
        let mut flat = false;
        if report.status == SolveStatus::Converged {
            let (rec, is_flat) = synthesize(&prob, &report.p_star, cfg.grid.bracket_refinement)?;
            flat = is_flat;
            if let ControlRecord::Multilevel(ml) = &rec {
                distinct = ml.distinct_levels().len();
            }
            if let Some(u2) = &l2_ctrl {
                let u_ml = rec.signal()?;
                let d = l2_distance(&prob, &|t| u_ml.value(t), &|t| u2.value(t));
                let norm = l2_distance(&prob, &|_| DVector::zeros(channels), &|t| u2.value(t));
                distance = Some(d);
                relative = Some(if norm > 0.0 { d / norm } else { d });
            }
        }

        let spec = &ml_cfg.penalization[0];
        let part = spec.partition().map_err(CliError::Config)?;
        let profile = spec.profile().expect("quadratic profile");
        let bound = channels as f64 * interp_error_bound(&profile, &part).global * horizon;
        let radius = (-part.lo()).min(part.hi());
        if radius <= 0.0 {
            return Err(CliError::Config(
                "penalization: partition interval must contain 0 in its interior".into(),
            ));
        }
        let l2_here = prob.with_kind(FunctionalKind::J2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..samples {
            let dir = DVector::from_fn(prob.system().state_dim(), |_, _| rng.random_range(-1.0..1.0));
            let peak = prob
                .adjoint_outputs(&dir)?
                .iter()
                .map(|q| q.amax())
                .fold(0.0f64, f64::max);
            if peak == 0.0 {
                continue;
            }
            let p = dir * (rng.random_range(0.0..1.0) * radius / peak);
            let diff = (eval_functional(&prob, &p)? - eval_functional(&l2_here, &p)?).abs();
            worst = worst.max(diff);
        }

        rows.push(ConvergenceRow {
            segments: m,
            spacing: part.max_spacing(),
            ml_status: report.status,
            l2_status: l2_report.status,
            distance,
            relative_distance: relative,
            distinct_levels: distinct,
            flat_adjoint: flat,
            max_functional_difference: worst,
            functional_bound: bound,
            bound_holds: worst <= bound,
        });
    }
    let decreasing = rows.iter().all(|r| r.distance.is_some())
        && rows
            .windows(2)
            .all(|w| w[1].distance.unwrap() < w[0].distance.unwrap());
    Ok(ConvergenceTable {
        name: cfg.name.clone(),
        rows,
        distances_strictly_decreasing: decreasing,
    })
}

pub fn table_csv(table: &ConvergenceTable) -> String {
    let mut out = String::from(
        "segments,spacing,ml_status,l2_status,distance,relative_distance,distinct_levels,flat_adjoint,max_functional_difference,functional_bound,bound_holds\n",
    );
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.16e}"));
    for r in &table.rows {
        out.push_str(&format!(
            "{},{:.16e},{:?},{:?},{},{},{},{},{:.16e},{:.16e},{}\n",
            r.segments,
            r.spacing,
            r.ml_status,
            r.l2_status,
            opt(r.distance),
            opt(r.relative_distance),
            r.distinct_levels,
            r.flat_adjoint,
            r.max_functional_difference,
            r.functional_bound,
            r.bound_holds
        ));
    }
    out
}
