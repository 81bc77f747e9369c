//! TOML run configuration with `${VAR}` environment interpolation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunnerError;
use crate::backends::{EndpointConfig, HttpBackend, Scenario, SimulatedBackend, TraceSampler};
use crate::temperature::Temperature;
use crate::temperature_plan::{build_grid, TemperaturePlan, DEFAULT_THETA_EASY};
use crate::verifiers::VerifierKind;
use crate::voting::{VotingParams, DEFAULT_MAX_ROUNDS, DEFAULT_MIN_ROUNDS, DEFAULT_TAU_CROSS, DEFAULT_TAU_INTRA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Simulated { scenario: PathBuf },
    Http(EndpointConfig),
}

/// Either a regular grid or a total budget split over explicit temperatures.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_min: Option<Temperature>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<Temperature>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<Temperature>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_temperature: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperatures: Option<Vec<Temperature>>,
}

impl PlanConfig {
    pub fn grid(t_min: Temperature, t_max: Temperature, step: Temperature, samples: u64) -> Self {
        PlanConfig {
            t_min: Some(t_min),
            t_max: Some(t_max),
            step: Some(step),
            samples_per_temperature: Some(samples),
            ..Default::default()
        }
    }

    pub fn resolve(&self) -> Result<TemperaturePlan, RunnerError> {
        let cfg = |e: String| RunnerError::Config(format!("[plan] {e}"));
        match (self.budget, &self.temperatures) {
            (Some(total), Some(temps)) => {
                if self.t_min.is_some() || self.t_max.is_some() || self.step.is_some() {
                    return Err(cfg("give either a grid or budget + temperatures, not both".into()));
                }
                TemperaturePlan::from_budget(total, temps).map_err(|e| cfg(e.to_string()))
            }
            (None, None) => {
                let (Some(lo), Some(hi), Some(samples)) = (self.t_min, self.t_max, self.samples_per_temperature)
                else {
                    return Err(cfg("grid needs t_min, t_max and samples_per_temperature".into()));
                };
                let step = self.step.unwrap_or(Temperature::from_tenths(1));
                build_grid(lo, hi, step, samples).map_err(|e| cfg(e.to_string()))
            }
            _ => Err(cfg("budget and temperatures go together".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteConfig {
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u32,
    #[serde(default = "default_min_rounds")]
    pub min_rounds: u32,
    #[serde(default = "default_tau_intra")]
    pub tau_intra: f64,
    #[serde(default = "default_tau_cross")]
    pub tau_cross: f64,
    /// Removed from the plan to form the fallback grid for survivors.
    #[serde(default = "default_exclude")]
    pub exclude: Vec<Temperature>,
    /// Voting temperatures; defaults to the fallback grid without T=0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperatures: Option<Vec<Temperature>>,
}

fn default_max_rounds() -> u32 {
    DEFAULT_MAX_ROUNDS
}
fn default_min_rounds() -> u32 {
    DEFAULT_MIN_ROUNDS
}
fn default_tau_intra() -> f64 {
    DEFAULT_TAU_INTRA
}
fn default_tau_cross() -> f64 {
    DEFAULT_TAU_CROSS
}
fn default_exclude() -> Vec<Temperature> {
    (1..=3).map(Temperature::from_tenths).collect()
}

impl Default for VoteConfig {
    fn default() -> Self {
        VoteConfig {
            max_rounds: DEFAULT_MAX_ROUNDS,
            min_rounds: DEFAULT_MIN_ROUNDS,
            tau_intra: DEFAULT_TAU_INTRA,
            tau_cross: DEFAULT_TAU_CROSS,
            exclude: default_exclude(),
            temperatures: None,
        }
    }
}

impl VoteConfig {
    /// Voting parameters, fallback plan and baseline plan.
    pub fn resolve(&self, plan: &TemperaturePlan) -> Result<(VotingParams, TemperaturePlan), RunnerError> {
        let cfg = |e: String| RunnerError::Config(format!("[vote] {e}"));
        let fallback = plan.without(&self.exclude).map_err(|e| cfg(e.to_string()))?;
        let temperatures = match &self.temperatures {
            Some(ts) => ts.clone(),
            None => fallback.temperatures().iter().copied().filter(|t| !t.is_zero()).collect(),
        };
        let params = VotingParams {
            temperatures,
            max_rounds: self.max_rounds,
            tau_intra: self.tau_intra,
            tau_cross: self.tau_cross,
            min_rounds: self.min_rounds,
        };
        params.validate().map_err(|e| cfg(e.to_string()))?;
        Ok((params, fallback))
    }
}

fn default_bins() -> usize {
    crate::entropy::DEFAULT_HISTOGRAM_BINS
}
fn default_theta_easy() -> f64 {
    DEFAULT_THETA_EASY
}
fn default_validation_threshold() -> f64 {
    32.0 / 1024.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportOptions {
    /// K values for the per-temperature curves; powers of two up to N when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_grid: Option<Vec<u64>>,
    #[serde(default = "default_theta_easy")]
    pub theta_easy: f64,
    /// Temperatures compared for the difficulty labels; the lowest and
    /// highest nonzero temperatures present when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty_pair: Option<(Temperature, Temperature)>,
    #[serde(default = "default_bins")]
    pub entropy_bins: usize,
    /// Questions whose best Avg@N is at or below this are exported for
    /// external judging.
    #[serde(default = "default_validation_threshold")]
    pub validation_threshold: f64,
    /// `judged_valid` overlay applied before any statistic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judged_valid: Option<PathBuf>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            k_grid: None,
            theta_easy: DEFAULT_THETA_EASY,
            difficulty_pair: None,
            entropy_bins: default_bins(),
            validation_threshold: default_validation_threshold(),
            judged_valid: None,
        }
    }
}

impl ReportOptions {
    pub fn validate(&self) -> Result<(), RunnerError> {
        let cfg = |e: &str| Err(RunnerError::Config(format!("[report] {e}")));
        if !(0.0..=1.0).contains(&self.theta_easy) {
            return cfg("theta_easy must lie in [0,1]");
        }
        if self.entropy_bins == 0 {
            return cfg("entropy_bins must be positive");
        }
        if self.k_grid.as_ref().is_some_and(|g| g.contains(&0)) {
            return cfg("k_grid values must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Question manifest (JSONL). Optional for simulated runs, where the
    /// scenario's questions are used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub prune_raw: bool,
    /// Verifier kind for manifest entries that name none.
    #[serde(default = "default_verifier_kind")]
    pub verifier: VerifierKind,
    pub backend: BackendConfig,
    pub plan: PlanConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vote: Option<VoteConfig>,
    #[serde(default)]
    pub report: ReportOptions,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_verifier_kind() -> VerifierKind {
    VerifierKind::BoxedInteger
}

/// Replaces `${NAME}` with the environment variable `NAME`.
pub fn interpolate_env(text: &str) -> Result<String, RunnerError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| RunnerError::Config("unterminated ${ in config".into()))?;
        let name = &after[..end];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(RunnerError::Config(format!("bad variable name {name:?} in config")));
        }
        let value = std::env::var(name)
            .map_err(|_| RunnerError::Config(format!("environment variable {name} is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, RunnerError> {
        let text = interpolate_env(text)?;
        toml::from_str(&text).map_err(|e| RunnerError::Config(e.to_string()))
    }

    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)
            .map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(m) = &mut self.manifest {
            fix(m);
        }
        if let BackendConfig::Simulated { scenario } = &mut self.backend {
            fix(scenario);
        }
        if let Some(j) = &mut self.report.judged_valid {
            fix(j);
        }
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return Err(RunnerError::Config(format!(
                "run_id {:?} must be non-empty and use [A-Za-z0-9._-]",
                self.run_id
            )));
        }
        if matches!(self.backend, BackendConfig::Simulated { .. }) && self.seed.is_none() {
            return Err(RunnerError::Config("simulated backend needs a seed".into()));
        }
        if let BackendConfig::Http(e) = &self.backend {
            e.validate().map_err(|e| RunnerError::Config(e.to_string()))?;
        }
        self.plan.resolve()?;
        self.report.validate()
    }

    pub fn plan(&self) -> Result<TemperaturePlan, RunnerError> {
        self.plan.resolve()
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn store_path(&self) -> PathBuf {
        self.output_dir.join(format!("{}.traces.jsonl", self.run_id))
    }

    pub fn load_scenario(&self) -> Result<Option<Scenario>, RunnerError> {
        match &self.backend {
            BackendConfig::Simulated { scenario } => load_scenario(scenario).map(Some),
            BackendConfig::Http(_) => Ok(None),
        }
    }

    pub fn build_backend(&self, scenario: Option<Scenario>) -> Result<Box<dyn TraceSampler>, RunnerError> {
        Ok(match &self.backend {
            BackendConfig::Simulated { scenario: path } => {
                let s = match scenario {
                    Some(s) => s,
                    None => load_scenario(path)?,
                };
                Box::new(SimulatedBackend::new(s).map_err(|e| RunnerError::Config(e.to_string()))?)
            }
            BackendConfig::Http(endpoint) => {
                Box::new(HttpBackend::new(endpoint.clone()).map_err(|e| RunnerError::Config(e.to_string()))?)
            }
        })
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, RunnerError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
    let scenario: Scenario = toml::from_str(&text)
        .map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
    scenario
        .validate()
        .map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
    Ok(scenario)
}
