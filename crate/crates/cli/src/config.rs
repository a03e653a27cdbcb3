use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use sdopf_core::grid::{bundled_case, load_case, GridCase};
use sdopf_core::oracle::OracleOptions;
use sdopf_core::trainer::TrainerConfig;

/// Everything a run needs. Every field has a default, so `{}` is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Case file path, or `ieee14` / `ieee30` for the bundled cases.
    pub case: String,
    pub output_dir: PathBuf,
    /// Trainer settings including the environment, scenario and network.
    pub trainer: TrainerConfig,
    pub eval: EvalSection,
    pub oracle: OracleSection,
    pub rollout: RolloutSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            case: "ieee14".into(),
            output_dir: PathBuf::from("runs"),
            trainer: TrainerConfig::default(),
            eval: EvalSection::default(),
            oracle: OracleSection::default(),
            rollout: RolloutSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Scenario seed of the first evaluation episode; later episodes count up.
    pub first_seed: u64,
    pub steps: usize,
    /// Also solve the oracle on every evaluation episode and report the gap.
    pub oracle_gap: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { first_seed: 10_000, steps: 1000, oracle_gap: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub scenario_seed: u64,
    pub start: usize,
    pub steps: usize,
    /// Steps per receding block.
    pub block: usize,
    /// Use the case's nominal demand at every step instead of a scenario.
    pub base_demand: bool,
    pub tol: f64,
    pub restarts: usize,
    pub max_outer: usize,
    pub max_inner: usize,
    pub seed: u64,
}

impl Default for OracleSection {
    fn default() -> Self {
        let o = OracleOptions::default();
        Self {
            scenario_seed: 10_000,
            start: 0,
            steps: 24,
            block: 24,
            base_demand: false,
            tol: o.tol,
            restarts: o.restarts,
            max_outer: o.max_outer,
            max_inner: o.max_inner,
            seed: o.seed,
        }
    }
}

impl OracleSection {
    pub fn options(&self) -> OracleOptions {
        OracleOptions {
            tol: self.tol,
            restarts: self.restarts,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            seed: self.seed,
            ..OracleOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RolloutPolicy {
    Random,
    /// Every device at the middle of its range, storage idle.
    Midrange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    pub scenario_seed: u64,
    pub steps: usize,
    pub policy: RolloutPolicy,
    pub policy_seed: u64,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self { scenario_seed: 0, steps: 24, policy: RolloutPolicy::Random, policy_seed: 0 }
    }
}

pub fn read_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
    let cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("malformed config file {}", path.display()))?;
    Ok(cfg)
}

/// Resolves `case` to a file, falling back to the bundled cases by name.
pub fn resolve_case(case: &str) -> anyhow::Result<(GridCase, Option<PathBuf>)> {
    let path = Path::new(case);
    if path.is_file() {
        let grid = load_case(path).with_context(|| format!("cannot load case {}", path.display()))?;
        return Ok((grid, Some(path.to_path_buf())));
    }
    if matches!(case, "ieee14" | "ieee30") {
        let grid = bundled_case(case).with_context(|| format!("cannot load bundled case {case}"))?;
        return Ok((grid, None));
    }
    bail!("case file not found: {}", path.display())
}
