use std::path::{Path, PathBuf};
use std::process::Command;

use multilevel_cli::output::{self, read_control, read_summary};
use multilevel_cli::runner::ControlRecord;
use multilevel_cli::{exit, ExperimentConfig};
use multilevel_core::lti::simulate_forward;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.toml"))
}

fn multilevel() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_multilevel"));
    cmd.env_remove(multilevel_cli::OUTPUT_ENV);
    cmd
}

fn run(args: &[&str], out: &Path) -> i32 {
    multilevel()
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
        .status
        .code()
        .expect("exit code")
}

#[test]
fn stored_control_resimulates_to_stored_terminal() {
    let out = tempfile::tempdir().unwrap();
    let code = run(&["run", scenario("osc-T05-fabre").to_str().unwrap()], out.path());
    assert_eq!(code, exit::PASS);
    let dir = out.path().join("osc-T05-fabre");
    let summary = read_summary(&dir.join(output::SUMMARY_FILE)).unwrap();
    let control = read_control(&dir.join(output::CONTROL_JSON)).unwrap();
    assert!(matches!(control, ControlRecord::Multilevel(_)));
    let cfg = ExperimentConfig::load(&scenario("osc-T05-fabre")).unwrap();
    let sys = cfg.build_system().unwrap();
    let signal = control.signal().unwrap();
    let x = simulate_forward(&sys, signal.as_ref(), &[0.0, sys.horizon()]).unwrap();
    let stored = summary.terminal_norm.unwrap();
    assert!((x.terminal().norm() - stored).abs() <= 1e-10);
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = scenario("osc-T4-beta3");
    assert_eq!(run(&["run", cfg.to_str().unwrap()], a.path()), exit::PASS);
    assert_eq!(run(&["run", cfg.to_str().unwrap()], b.path()), exit::PASS);
    for file in [output::CONTROL_CSV, output::TRAJECTORY_CSV, output::TRACE_CSV, output::CONTROL_JSON] {
        let x = std::fs::read(a.path().join("osc-T4-beta3").join(file)).unwrap();
        let y = std::fs::read(b.path().join("osc-T4-beta3").join(file)).unwrap();
        assert!(x == y, "{file} differs between runs");
    }
}

#[test]
fn exit_codes_follow_the_contract() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run(&["run", scenario("scalar-diverge").to_str().unwrap()], out.path()), exit::PASS);
    assert_eq!(run(&["run", scenario("osc-T05-small").to_str().unwrap()], out.path()), exit::DIVERGED);

    let bad = out.path().join("bad.toml");
    std::fs::write(&bad, "name = \"bad\"\nfunctional = { kind = \"jml\" }\n[system]\na = [[1.0, 2.0]]\n").unwrap();
    assert_eq!(run(&["run", bad.to_str().unwrap()], out.path()), exit::CONFIG);
    let missing = out.path().join("missing.toml");
    assert_eq!(run(&["run", missing.to_str().unwrap()], out.path()), exit::CONFIG);
}

#[test]
fn expectation_mismatch_fails_the_checks() {
    let out = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("scalar-diverge"))
        .unwrap()
        .replace("expect = \"diverged\"", "expect = \"controlled\"");
    let cfg = out.path().join("flipped.toml");
    std::fs::write(&cfg, text).unwrap();
    assert_eq!(run(&["run", cfg.to_str().unwrap()], out.path()), exit::DIVERGED);
}

#[test]
fn environment_variable_sets_the_output_root() {
    let out = tempfile::tempdir().unwrap();
    let output = multilevel()
        .env(multilevel_cli::OUTPUT_ENV, out.path())
        .args(["run", scenario("scalar-converge").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(exit::PASS));
    assert!(out.path().join("scalar-converge").join(output::SUMMARY_FILE).exists());
}

#[test]
fn report_verb_reads_back_summaries() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run(&["run", scenario("scalar-converge").to_str().unwrap()], out.path()), exit::PASS);
    let output = multilevel()
        .args(["report"])
        .arg(out.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(exit::PASS));
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.starts_with("PASS scalar-converge"), "{text}");

    let empty = tempfile::tempdir().unwrap();
    assert_eq!(run(&["report", empty.path().to_str().unwrap()], out.path()), exit::CONFIG);
}

#[test]
fn suite_writes_an_index_and_reports_the_worst_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["scalar-converge", "osc-T05-jml"] {
        std::fs::copy(scenario(name), dir.path().join(format!("{name}.toml"))).unwrap();
    }
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run(&["suite", dir.path().to_str().unwrap()], out.path()), exit::PASS);
    let index: multilevel_cli::SuiteSummary =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("suite.json")).unwrap()).unwrap();
    assert_eq!(index.entries.len(), 2);
    assert!(index.passed);

    std::fs::copy(scenario("osc-T05-small"), dir.path().join("osc-T05-small.toml")).unwrap();
    assert_eq!(run(&["suite", dir.path().to_str().unwrap()], out.path()), exit::DIVERGED);
}
