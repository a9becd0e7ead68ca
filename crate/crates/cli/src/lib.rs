//! Experiment runner for multilevel null-control synthesis: TOML scenarios
//! in, JSON/CSV reports out, with an exit-code contract for CI.

pub mod config;
pub mod error;
pub mod output;
pub mod runner;
pub mod study;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, Overrides};
pub use error::{exit, CliError};
pub use runner::{run_scenario, run_two_channel, ExperimentReport};
pub use study::{convergence_study, ConvergenceTable};

/// Environment variable naming the output root.
pub const OUTPUT_ENV: &str = "MULTILEVEL_OUT";

/// Scenario configs (`*.toml`) in `dir`, sorted by file name.
pub fn scenario_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    Ok(files)
}

/// Outcome of one scenario of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub config: String,
    pub name: String,
    pub exit_code: i32,
    pub passed: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub entries: Vec<SuiteEntry>,
    pub passed: bool,
    pub exit_code: i32,
}

/// Loads, runs and writes one scenario into `root/<name>`.
pub fn run_and_write(path: &Path, root: &Path, overrides: &Overrides) -> SuiteEntry {
    let config = path.display().to_string();
    let mut cfg = match ExperimentConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            return SuiteEntry {
                config,
                name: String::new(),
                exit_code: e.exit_code(),
                passed: false,
                error: Some(e.to_string()),
            }
        }
    };
    cfg.apply(overrides);
    let name = cfg.name.clone();
    let result = run_scenario(&cfg)
        .and_then(|r| output::write_report(&r, &root.join(&name)).map(|_| r));
    match result {
        Ok(r) => SuiteEntry {
            config,
            name,
            exit_code: r.exit_code,
            passed: r.passed,
            error: None,
        },
        Err(e) => SuiteEntry {
            config,
            name,
            exit_code: e.exit_code(),
            passed: false,
            error: Some(e.to_string()),
        },
    }
}

/// Runs every scenario in `dir` concurrently, one thread each, then writes
/// `root/suite.json` once all have finished.
pub fn run_suite(dir: &Path, root: &Path, overrides: &Overrides) -> Result<SuiteSummary, CliError> {
    let files = scenario_files(dir)?;
    let entries: Vec<SuiteEntry> = std::thread::scope(|s| {
        let handles: Vec<_> = files
            .iter()
            .map(|f| s.spawn(move || run_and_write(f, root, overrides)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scenario thread panicked"))
            .collect()
    });
    let passed = entries.iter().all(|e| e.passed);
    let exit_code = entries.iter().map(|e| e.exit_code).max().unwrap_or(exit::PASS);
    let summary = SuiteSummary {
        entries,
        passed,
        exit_code,
    };
    std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
    let path = root.join("suite.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| CliError::io(&path, e))?;
    Ok(summary)
}
