//! Report files: one directory per scenario.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::runner::{ControlRecord, ExperimentReport};

pub const REPORT_FILE: &str = "report.json";
pub const CONTROL_JSON: &str = "control.json";
pub const CONTROL_CSV: &str = "control.csv";
pub const TRAJECTORY_CSV: &str = "trajectory.csv";
pub const TRACE_CSV: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Machine-readable pass/fail record of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub passed: bool,
    pub exit_code: i32,
    pub status: String,
    pub terminal_norm: Option<f64>,
    pub failed_checks: Vec<String>,
}

impl Summary {
    pub fn of(report: &ExperimentReport) -> Self {
        Self {
            name: report.name.clone(),
            passed: report.passed,
            exit_code: report.exit_code,
            status: format!("{:?}", report.solve.status),
            terminal_norm: report.terminal_norm,
            failed_checks: report
                .checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| c.name.clone())
                .collect(),
        }
    }
}

/// Output root: explicit flag, then the environment variable, then the config, then the default.
pub fn output_root(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(crate::OUTPUT_ENV) {
        return PathBuf::from(p);
    }
    config
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(crate::config::defaults::OUTPUT_ROOT))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn control_csv(control: &ControlRecord) -> String {
    let mut out = String::new();
    match control {
        ControlRecord::Multilevel(ml) => {
            out.push_str("channel,interval,start,end,level\n");
            for (k, ch) in ml.channels.iter().enumerate() {
                let mut edges = vec![0.0];
                edges.extend_from_slice(&ch.switch_times);
                edges.push(ml.horizon);
                for (j, level) in ch.levels.iter().enumerate() {
                    let _ = writeln!(out, "{k},{j},{},{},{}", num(edges[j]), num(edges[j + 1]), num(*level));
                }
            }
        }
        ControlRecord::Sampled { times, values } => {
            let k = values.first().map_or(0, Vec::len);
            out.push('t');
            for c in 0..k {
                let _ = write!(out, ",u{}", c + 1);
            }
            out.push('\n');
            for (t, v) in times.iter().zip(values) {
                out.push_str(&num(*t));
                for x in v {
                    out.push(',');
                    out.push_str(&num(*x));
                }
                out.push('\n');
            }
        }
    }
    out
}

pub fn trajectory_csv(traj: &multilevel_core::lti::Trajectory) -> String {
    let n = traj.states.first().map_or(0, |x| x.len());
    let mut out = String::from("t");
    for i in 0..n {
        let _ = write!(out, ",x{}", i + 1);
    }
    out.push('\n');
    for (t, x) in traj.grid.iter().zip(&traj.states) {
        out.push_str(&num(*t));
        for v in x.iter() {
            out.push(',');
            out.push_str(&num(*v));
        }
        out.push('\n');
    }
    out
}

pub fn trace_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("iteration,value,gradient_norm,p_norm,step\n");
    for r in &report.trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration,
            num(r.value),
            num(r.gradient_norm),
            num(r.p_norm),
            num(r.step)
        );
    }
    out
}

/// Writes every report file into `dir`, creating it.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write(&dir.join(REPORT_FILE), &serde_json::to_string_pretty(report)?)?;
    if let Some(c) = &report.control {
        write(&dir.join(CONTROL_JSON), &serde_json::to_string_pretty(c)?)?;
        write(&dir.join(CONTROL_CSV), &control_csv(c))?;
    }
    if let Some(t) = &report.trajectory {
        write(&dir.join(TRAJECTORY_CSV), &trajectory_csv(t))?;
    }
    write(&dir.join(TRACE_CSV), &trace_csv(report))?;
    write(
        &dir.join(SUMMARY_FILE),
        &serde_json::to_string_pretty(&Summary::of(report))?,
    )?;
    Ok(())
}

pub fn read_control(path: &Path) -> Result<ControlRecord, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_summary(path: &Path) -> Result<Summary, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
