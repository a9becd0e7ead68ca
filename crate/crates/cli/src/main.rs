use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use multilevel_cli::config::defaults;
use multilevel_cli::output::{self, output_root, Summary};
use multilevel_cli::study::table_csv;
use multilevel_cli::{
    convergence_study, exit, run_and_write, run_suite, CliError, ExperimentConfig, Overrides, OUTPUT_ENV,
};

/// Multilevel (staircase) null-control synthesis for linear systems.
///
/// Exit codes: 0 all checks passed, 2 checks failed, 3 solver diverged
/// unexpectedly, 4 configuration error.
#[derive(Parser)]
#[command(name = "multilevel", version)]
struct Cli {
    /// Quadrature nodes, overriding the config.
    #[arg(long, global = true)]
    grid: Option<usize>,
    /// Seed for a random optimizer start (and the convergence-study sample).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Optimizer stationarity tolerance, overriding the config.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Output root directory. Falls back to the MULTILEVEL_OUT environment
    /// variable, then the config's output_dir, then ./out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its report directory.
    Run { config: PathBuf },
    /// Run every *.toml scenario in a directory concurrently.
    Suite { dir: PathBuf },
    /// Compare multilevel and quadratic-penalty controls over partition sizes.
    Converge {
        config: PathBuf,
        /// Uniform partition sizes, strictly increasing.
        #[arg(long, value_delimiter = ',', default_values_t = vec![4usize, 8, 16, 32])]
        sizes: Vec<usize>,
        /// Random adjoint data for the functional-difference check.
        #[arg(long, default_value_t = defaults::STUDY_SAMPLES)]
        samples: usize,
    },
    /// Print the pass/fail summaries found under a directory.
    Report { dir: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let overrides = Overrides {
        grid: cli.grid,
        seed: cli.seed,
        tolerance: cli.tol,
    };
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let root = output_root(cli.out.as_deref(), cfg.output_dir.as_deref());
            let entry = run_and_write(&config, &root, &overrides);
            if let Some(e) = &entry.error {
                eprintln!("error: {e}");
            } else {
                print_summary(&output::read_summary(&root.join(&entry.name).join(output::SUMMARY_FILE))?);
                println!("wrote {}", root.join(&entry.name).display());
            }
            Ok(entry.exit_code)
        }
        Command::Suite { dir } => {
            let root = output_root(cli.out.as_deref(), None);
            let summary = run_suite(&dir, &root, &overrides)?;
            for e in &summary.entries {
                let verdict = if e.passed { "PASS" } else { "FAIL" };
                println!("{verdict} {:<20} exit {} {}", e.name, e.exit_code, e.error.as_deref().unwrap_or(""));
            }
            Ok(summary.exit_code)
        }
        Command::Converge {
            config,
            sizes,
            samples,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.apply(&Overrides { seed: None, ..overrides });
            let root = output_root(cli.out.as_deref(), cfg.output_dir.as_deref());
            let seed = cli.seed.unwrap_or(defaults::STUDY_SEED);
            let table = convergence_study(&cfg, &sizes, samples, seed)?;
            let dir = root.join(format!("{}-convergence", cfg.name));
            std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
            let csv = dir.join("convergence.csv");
            std::fs::write(&csv, table_csv(&table)).map_err(|e| CliError::io(&csv, e))?;
            let json = dir.join("convergence.json");
            std::fs::write(&json, serde_json::to_string_pretty(&table)?).map_err(|e| CliError::io(&json, e))?;
            print!("{}", table_csv(&table));
            let ok = table.distances_strictly_decreasing && table.rows.iter().all(|r| r.bound_holds);
            Ok(if ok { exit::PASS } else { exit::CHECKS_FAILED })
        }
        Command::Report { dir } => report(&dir),
    }
}

fn print_summary(s: &Summary) {
    let verdict = if s.passed { "PASS" } else { "FAIL" };
    println!(
        "{verdict} {} status={} terminal={} failed={:?}",
        s.name,
        s.status,
        s.terminal_norm.map_or("-".into(), |n| format!("{n:.3e}")),
        s.failed_checks
    );
}

fn report(dir: &Path) -> Result<i32, CliError> {
    let mut summaries = Vec::new();
    let direct = dir.join(output::SUMMARY_FILE);
    if direct.exists() {
        summaries.push(output::read_summary(&direct)?);
    } else {
        let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(output::SUMMARY_FILE).exists())
            .collect();
        subdirs.sort();
        for d in subdirs {
            summaries.push(output::read_summary(&d.join(output::SUMMARY_FILE))?);
        }
    }
    if summaries.is_empty() {
        return Err(CliError::Config(format!(
            "{}: no scenario summaries found (looked for */{}; set --out or {OUTPUT_ENV})",
            dir.display(),
            output::SUMMARY_FILE
        )));
    }
    for s in &summaries {
        print_summary(s);
    }
    Ok(if summaries.iter().all(|s| s.passed) {
        exit::PASS
    } else {
        exit::CHECKS_FAILED
    })
}
