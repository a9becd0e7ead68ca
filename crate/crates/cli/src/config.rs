//! Experiment configuration (TOML) and the defaults of every tunable.

use std::path::{Path, PathBuf};

use multilevel_core::dual::{FunctionalKind, OptimizerSettings, Quadrature, StartPoint, StepRule};
use multilevel_core::fenchel::PrimalSettings;
use multilevel_core::lti::LtiSystem;
use multilevel_core::pwl::{build_penalization, ConvexProfile, Partition, PwlConvex};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Defaults applied when a config omits a field.
pub mod defaults {
    pub const QUADRATURE_NODES: usize = 4000;
    pub const BRACKET_REFINEMENT: usize = 8;
    pub const TRAJECTORY_SAMPLES: usize = 401;
    pub const GRAM_NODES: usize = 4001;

    pub const MAX_ITERATIONS: usize = 50_000;
    pub const TOLERANCE: f64 = 1e-6;
    pub const DIVERGENCE_THRESHOLD: f64 = 1e6;
    pub const DIVERGENCE_WINDOW: usize = 100;
    pub const STALL_WINDOW: usize = 200;
    pub const STALL_TOLERANCE: f64 = 1e-12;
    pub const RANDOM_START_RADIUS: f64 = 1.0;

    pub const TERMINAL_TOLERANCE: f64 = 1e-2;
    pub const FAILURE_THRESHOLD: f64 = 0.1;
    pub const GAP_TOLERANCE: f64 = 1e-3;
    pub const DISTANCE_TOLERANCE: f64 = 0.05;
    pub const NODEWISE_FRACTION: f64 = 0.99;
    pub const NODEWISE_SLACK: f64 = 1e-6;
    pub const PRIMAL_FEASIBILITY: f64 = 1e-6;

    pub const PRIMAL_MAX_ITERATIONS: usize = 20_000;
    pub const PRIMAL_TOLERANCE: f64 = 1e-9;
    pub const PRIMAL_POLISH: f64 = 1e-8;

    pub const STUDY_SAMPLES: usize = 100;
    pub const STUDY_SEED: u64 = 7;

    pub const OUTPUT_ROOT: &str = "out";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub system: SystemSpec,
    /// One entry per control channel, or a single entry shared by all channels.
    pub penalization: Vec<PenalizationSpec>,
    pub functional: FunctionalKind,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub checks: CheckSpec,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    /// Rows of `A`.
    pub a: Vec<Vec<f64>>,
    /// Rows of `B`; one column per control channel.
    pub b: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    pub horizon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileName {
    /// `𝒫(u) = u²`.
    Quadratic,
    /// Values supplied at the partition points.
    CustomTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformPartition {
    pub lo: f64,
    pub hi: f64,
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenalizationSpec {
    pub profile: ProfileName,
    /// Explicit partition points; exclusive with `uniform`.
    #[serde(default)]
    pub points: Option<Vec<f64>>,
    #[serde(default)]
    pub uniform: Option<UniformPartition>,
    /// Profile values at the points, for `custom-table`.
    #[serde(default)]
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub step_rule: StepRule,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub divergence_threshold: f64,
    pub divergence_window: usize,
    pub stall_window: usize,
    pub stall_tolerance: f64,
    pub start: StartPoint,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            step_rule: StepRule::BarzilaiBorwein,
            max_iterations: defaults::MAX_ITERATIONS,
            tolerance: defaults::TOLERANCE,
            divergence_threshold: defaults::DIVERGENCE_THRESHOLD,
            divergence_window: defaults::DIVERGENCE_WINDOW,
            stall_window: defaults::STALL_WINDOW,
            stall_tolerance: defaults::STALL_TOLERANCE,
            start: StartPoint::Zero,
        }
    }
}

impl OptimizerSpec {
    pub fn settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            step_rule: self.step_rule,
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            divergence_threshold: self.divergence_threshold,
            divergence_window: self.divergence_window,
            stall_window: self.stall_window,
            stall_tolerance: self.stall_tolerance,
            start: self.start,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub quadrature_nodes: usize,
    /// Bracketing grid density for switching times, relative to the quadrature.
    pub bracket_refinement: usize,
    pub trajectory_samples: usize,
    pub gram_nodes: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            quadrature_nodes: defaults::QUADRATURE_NODES,
            bracket_refinement: defaults::BRACKET_REFINEMENT,
            trajectory_samples: defaults::TRAJECTORY_SAMPLES,
            gram_nodes: defaults::GRAM_NODES,
        }
    }
}

/// What a scenario is expected to show.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expectation {
    /// Converges and steers the state to within `terminal_tolerance` of zero.
    Controlled,
    /// Diverges, or leaves a terminal norm above `failure_threshold`.
    Uncontrolled,
    /// The solver reports divergence.
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSpec {
    pub expect: Expectation,
    pub terminal_tolerance: f64,
    pub failure_threshold: f64,
    pub staircase: bool,
    /// Admissible level values; every extracted level must be one of them.
    pub levels: Option<Vec<f64>>,
    pub solvable: bool,
    pub fenchel: bool,
    pub gap_tolerance: f64,
    pub distance_tolerance: f64,
    pub nodewise_fraction: f64,
    pub nodewise_slack: f64,
    /// Terminal norm allowed for the primal control, relative to `1 + ‖x0‖`.
    pub primal_feasibility: f64,
    pub primal: PrimalSettings,
    pub max_runtime_secs: Option<f64>,
}

impl Default for CheckSpec {
    fn default() -> Self {
        Self {
            expect: Expectation::Controlled,
            terminal_tolerance: defaults::TERMINAL_TOLERANCE,
            failure_threshold: defaults::FAILURE_THRESHOLD,
            staircase: true,
            levels: None,
            solvable: true,
            fenchel: false,
            gap_tolerance: defaults::GAP_TOLERANCE,
            distance_tolerance: defaults::DISTANCE_TOLERANCE,
            nodewise_fraction: defaults::NODEWISE_FRACTION,
            nodewise_slack: defaults::NODEWISE_SLACK,
            primal_feasibility: defaults::PRIMAL_FEASIBILITY,
            primal: PrimalSettings {
                max_iterations: defaults::PRIMAL_MAX_ITERATIONS,
                tolerance: defaults::PRIMAL_TOLERANCE,
                feasibility: defaults::PRIMAL_POLISH,
            },
            max_runtime_secs: None,
        }
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub grid: Option<usize>,
    pub seed: Option<u64>,
    pub tolerance: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(n) = o.grid {
            self.grid.quadrature_nodes = n;
        }
        if let Some(tol) = o.tolerance {
            self.optimizer.tolerance = tol;
        }
        if let Some(seed) = o.seed {
            if let StartPoint::Random { radius, .. } = self.optimizer.start {
                self.optimizer.start = StartPoint::Random { seed, radius };
            } else {
                self.optimizer.start = StartPoint::Random {
                    seed,
                    radius: defaults::RANDOM_START_RADIUS,
                };
            }
        }
    }

    pub fn build_system(&self) -> Result<LtiSystem, CliError> {
        let s = &self.system;
        let n = s.x0.len();
        if n == 0 {
            return Err(CliError::Config("system.x0: must have at least one entry".into()));
        }
        if s.a.len() != n || s.a.iter().any(|r| r.len() != n) {
            return Err(CliError::Config(format!("system.a: expected a {n}x{n} matrix")));
        }
        let k = s.b.first().map_or(0, Vec::len);
        if s.b.len() != n || k == 0 || s.b.iter().any(|r| r.len() != k) {
            return Err(CliError::Config(format!(
                "system.b: expected {n} rows with the same positive number of columns"
            )));
        }
        if !(s.horizon.is_finite() && s.horizon > 0.0) {
            return Err(CliError::Config("system.horizon: must be positive".into()));
        }
        let a = DMatrix::from_fn(n, n, |i, j| s.a[i][j]);
        let b = DMatrix::from_fn(n, k, |i, j| s.b[i][j]);
        LtiSystem::new(a, b, DVector::from_vec(s.x0.clone()), s.horizon)
            .map_err(|e| CliError::Config(format!("system: {e}")))
    }

    /// One penalization per channel.
    pub fn build_penalizations(&self, channels: usize) -> Result<Vec<PwlConvex>, CliError> {
        let specs = &self.penalization;
        if specs.len() != 1 && specs.len() != channels {
            return Err(CliError::Config(format!(
                "penalization: expected 1 or {channels} entries, got {}",
                specs.len()
            )));
        }
        (0..channels)
            .map(|k| {
                let idx = if specs.len() == 1 { 0 } else { k };
                specs[idx]
                    .build()
                    .map_err(|e| CliError::Config(format!("penalization[{idx}]: {e}")))
            })
            .collect()
    }

    pub fn quadrature(&self) -> Result<Quadrature, CliError> {
        Quadrature::uniform(self.system.horizon, self.grid.quadrature_nodes)
            .map_err(|e| CliError::Config(format!("grid.quadrature_nodes: {e}")))
    }
}

impl PenalizationSpec {
    pub fn partition(&self) -> Result<Partition, String> {
        match (&self.points, &self.uniform) {
            (Some(p), None) => Partition::new(p.clone()).map_err(|e| format!("points: {e}")),
            (None, Some(u)) => {
                Partition::uniform(u.lo, u.hi, u.segments).map_err(|e| format!("uniform: {e}"))
            }
            _ => Err("give exactly one of `points` and `uniform`".into()),
        }
    }

    pub fn profile(&self) -> Option<ConvexProfile> {
        match self.profile {
            ProfileName::Quadratic => Some(ConvexProfile::quadratic()),
            ProfileName::CustomTable => None,
        }
    }

    pub fn build(&self) -> Result<PwlConvex, String> {
        let part = self.partition()?;
        match self.profile {
            ProfileName::Quadratic => {
                if self.values.is_some() {
                    return Err("values: only allowed with profile = \"custom-table\"".into());
                }
                let profile = ConvexProfile::quadratic();
                profile.validate(&part).map_err(|e| format!("profile: {e}"))?;
                build_penalization(&profile, &part).map_err(|e| e.to_string())
            }
            ProfileName::CustomTable => {
                let values = self
                    .values
                    .as_ref()
                    .ok_or("values: required with profile = \"custom-table\"")?;
                PwlConvex::interpolate(part.points(), values).map_err(|e| format!("values: {e}"))
            }
        }
    }

    /// A copy with a uniform partition of the same interval into `segments` pieces.
    pub fn with_segments(&self, segments: usize) -> Result<Self, String> {
        let part = self.partition()?;
        Ok(Self {
            profile: self.profile,
            points: None,
            uniform: Some(UniformPartition {
                lo: part.lo(),
                hi: part.hi(),
                segments,
            }),
            values: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const OSC: &str = r#"
name = "osc"
functional = { kind = "jml" }

[system]
a = [[0.0, 1.0], [-1.0, 0.0]]
b = [[0.0], [1.0]]
x0 = [-1.0, 0.5]
horizon = 4.0

[[penalization]]
profile = "quadratic"
points = [-1.0, -0.5, 0.0, 0.5, 1.0]
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(OSC).unwrap();
        assert_eq!(cfg.grid.quadrature_nodes, defaults::QUADRATURE_NODES);
        assert_eq!(cfg.checks.expect, Expectation::Controlled);
        let sys = cfg.build_system().unwrap();
        let pens = cfg.build_penalizations(sys.channels()).unwrap();
        assert_eq!(pens[0].slopes(), &[-1.5, -0.5, 0.5, 1.5]);
    }

    #[test]
    fn beta_kind_and_overrides() {
        let text = OSC.replace(r#"{ kind = "jml" }"#, r#"{ kind = "jml-beta", beta = 3.0 }"#);
        let mut cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.functional, FunctionalKind::JmlBeta(3.0));
        cfg.apply(&Overrides {
            grid: Some(100),
            seed: Some(5),
            tolerance: Some(1e-8),
        });
        assert_eq!(cfg.grid.quadrature_nodes, 100);
        assert_eq!(cfg.optimizer.tolerance, 1e-8);
        assert_eq!(
            cfg.optimizer.start,
            StartPoint::Random {
                seed: 5,
                radius: defaults::RANDOM_START_RADIUS
            }
        );
    }

    #[test]
    fn errors_name_the_field() {
        let bad = OSC.replace("horizon = 4.0", "horizon = -1.0");
        let err = ExperimentConfig::from_toml(&bad).unwrap().build_system().unwrap_err();
        assert!(err.to_string().contains("system.horizon"), "{err}");
        let bad = OSC.replace("x0 = [-1.0, 0.5]", "x0 = [-1.0]");
        let err = ExperimentConfig::from_toml(&bad).unwrap().build_system().unwrap_err();
        assert!(err.to_string().contains("system.a"), "{err}");
        let bad = OSC.replace("horizon = 4.0", "horizon = 4.0\nbogus = 1");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let bad = OSC.replace("points = [-1.0, -0.5, 0.0, 0.5, 1.0]", "points = [1.0, 0.0, 2.0]");
        let cfg = ExperimentConfig::from_toml(&bad).unwrap();
        let err = cfg.build_penalizations(1).unwrap_err();
        assert!(err.to_string().contains("penalization[0]"), "{err}");
    }

    #[test]
    fn custom_table_penalization() {
        let text = OSC.replace(
            "profile = \"quadratic\"\npoints = [-1.0, -0.5, 0.0, 0.5, 1.0]",
            "profile = \"custom-table\"\npoints = [-1.0, 0.0, 1.0]\nvalues = [1.0, 0.0, 1.0]",
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let pens = cfg.build_penalizations(1).unwrap();
        assert_eq!(pens[0].slopes(), &[-1.0, 1.0]);
    }
}
