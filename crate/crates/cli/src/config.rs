//! Scenario configuration files.

use std::path::{Path, PathBuf};

use cssmpc::conic::SolveSettings;
use cssmpc::linalg::{row_major, Mat, Vector};
use cssmpc::polytope::Polytope;
use cssmpc::sim::{Scenario, TrialSettings};
use cssmpc::smpc::{InitMode, SmpcOptions};
use cssmpc::sysmodel::{ChanceSpec, ParameterHull, StageCost, SystemRealization};
use cssmpc::terminal::TerminalOptions;
use cssmpc::vehicle::{build_scenario, ReferenceProfile, VehicleSetup};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Scenario(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub system: SystemConfig,
    #[serde(default)]
    pub init_mode: InitMode,
    #[serde(default)]
    pub smpc: SmpcOptions,
    #[serde(default)]
    pub terminal: TerminalOptions,
    #[serde(default)]
    pub solver: SolveSettings,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_variants")]
    pub variants: Vec<VariantName>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_trials() -> usize {
    20
}

fn default_variants() -> Vec<VariantName> {
    vec![VariantName::Robust, VariantName::Nominal, VariantName::None]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum VariantName {
    /// Ingredients from the full parameter hull.
    Robust,
    /// Ingredients from a single realization at the schedule mean.
    Nominal,
    /// No terminal constraints.
    None,
}

impl VariantName {
    pub fn as_str(self) -> &'static str {
        match self {
            VariantName::Robust => "robust",
            VariantName::Nominal => "nominal",
            VariantName::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum SystemConfig {
    Vehicle(VehicleConfig),
    Explicit(Box<ExplicitConfig>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleConfig {
    #[serde(default)]
    pub setup: VehicleSetup,
    /// Defaults to the built-in ramp-and-pulse profile of `steps` entries.
    #[serde(default)]
    pub profile: Option<ReferenceProfile>,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_steps() -> usize {
    60
}

/// Constraint rows `[a…, b]` with one violation probability per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowsConfig {
    pub rows: Vec<Vec<f64>>,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    #[serde(with = "row_major")]
    pub q: Mat,
    #[serde(with = "row_major")]
    pub r: Mat,
    pub goal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitConfig {
    pub hull: Vec<SystemRealization>,
    /// Realization per step; the last entry is held past its end.
    pub schedule: Vec<SystemRealization>,
    /// Defaults to the entrywise mean of the first `steps` scheduled realizations.
    #[serde(default)]
    pub nominal: Option<SystemRealization>,
    pub state: RowsConfig,
    pub control: RowsConfig,
    pub cost: CostConfig,
    pub horizon: usize,
    pub steps: usize,
    pub x0: Vec<f64>,
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn trial_settings(&self) -> TrialSettings {
        TrialSettings { init: self.init_mode, smpc: self.smpc, solver: self.solver }
    }

    pub fn scenario(&self) -> Result<Scenario, ConfigError> {
        match &self.system {
            SystemConfig::Vehicle(v) => {
                let profile = v.profile.clone().unwrap_or_else(|| ReferenceProfile::default_profile(v.steps));
                build_scenario(&v.setup, &profile).map_err(|e| ConfigError::Scenario(e.to_string()))
            }
            SystemConfig::Explicit(e) => e.scenario(),
        }
    }
}

fn checked(sys: &SystemRealization) -> Result<SystemRealization, ConfigError> {
    SystemRealization::new(sys.a.clone(), sys.b.clone(), sys.d.clone(), sys.r.clone())
        .map_err(|e| ConfigError::Scenario(e.to_string()))
}

fn polytope(rows: &RowsConfig, dim: usize, what: &str) -> Result<Polytope, ConfigError> {
    if let Some(bad) = rows.rows.iter().find(|r| r.len() != dim + 1) {
        return Err(ConfigError::Scenario(format!(
            "{what} row has {} entries, expected {}",
            bad.len(),
            dim + 1
        )));
    }
    Ok(Polytope::from_rows(dim, rows.rows.iter().map(|r| (Vector::from_column_slice(&r[..dim]), r[dim]))))
}

impl ExplicitConfig {
    pub fn scenario(&self) -> Result<Scenario, ConfigError> {
        let bad = |msg: String| ConfigError::Scenario(msg);
        let vertices = self.hull.iter().map(checked).collect::<Result<Vec<_>, _>>()?;
        let hull = ParameterHull::new(vertices).map_err(|e| bad(e.to_string()))?;
        let (nx, nu) = (hull.nx(), hull.nu());
        if self.horizon == 0 || self.steps == 0 {
            return Err(bad("horizon and steps must be positive".into()));
        }
        if self.schedule.is_empty() {
            return Err(bad("schedule must contain at least one realization".into()));
        }
        let mut schedule = self.schedule.iter().map(checked).collect::<Result<Vec<_>, _>>()?;
        if let Some(k) = schedule.iter().position(|s| s.nx() != nx || s.nu() != nu || s.nw() != hull.nw()) {
            return Err(bad(format!("schedule step {k} has shapes different from the hull")));
        }
        let needed = self.steps + self.horizon - 1;
        while schedule.len() < needed {
            schedule.push(schedule.last().expect("nonempty").clone());
        }
        let nominal = match &self.nominal {
            Some(n) => checked(n)?,
            None => {
                let used = &schedule[..self.steps];
                let k = used.len() as f64;
                let first = &used[0];
                let (mut a, mut b, mut d, mut r) = (first.a.clone(), first.b.clone(), first.d.clone(), first.r.clone());
                for s in &used[1..] {
                    a += &s.a;
                    b += &s.b;
                    d += &s.d;
                    r += &s.r;
                }
                SystemRealization::new(a / k, b / k, d / k, r / k).map_err(|e| bad(e.to_string()))?
            }
        };
        let state = polytope(&self.state, nx, "state")?;
        let control = polytope(&self.control, nu, "control")?;
        let spec = ChanceSpec::from_polytopes(&state, &self.state.probabilities, &control, &self.control.probabilities)
            .map_err(|e| bad(e.to_string()))?;
        let cost = StageCost::new(self.cost.q.clone(), self.cost.r.clone(), Vector::from_column_slice(&self.cost.goal))
            .map_err(|e| bad(e.to_string()))?;
        if cost.q.nrows() != nx || cost.r.nrows() != nu || cost.goal.len() != nx {
            return Err(bad("cost dimensions do not match the system".into()));
        }
        if self.x0.len() != nx {
            return Err(bad(format!("x0 has {} entries, expected {nx}", self.x0.len())));
        }
        Ok(Scenario {
            hull,
            nominal,
            schedule,
            spec,
            cost,
            horizon: self.horizon,
            steps: self.steps,
            x0: Vector::from_column_slice(&self.x0),
        })
    }
}
