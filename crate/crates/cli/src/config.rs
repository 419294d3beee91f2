//! Run configuration: a JSON file whose values command-line flags override.

use std::path::Path;

use moo_core::dag::split::{TimingMode, TreeParams};
use moo_core::dag::RootPolicy;
use moo_core::generate::{SpikeParams, UniformParams};
use moo_core::solver::SolverConfig;
use moo_core::variance::{Estimator, VarianceParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub threads: Option<usize>,
    pub solver: SolverConfig,
    pub pipeline: PipelineConfig,
    pub gen: GenConfig,
    pub dag: DagConfig,
    pub split: SplitConfig,
    pub variance: VarianceConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Stage 1 uses this many sampled users; `None` solves on everyone.
    pub sample_size: Option<usize>,
    pub estimator: Option<Estimator>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub uniform: UniformParams,
    pub spike: SpikeParams,
    pub tree: TreeParams,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DagConfig {
    pub root: RootPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub tree: TreeParams,
    pub reps: usize,
    pub w: f64,
    pub beta: f64,
    pub timing: TimingMode,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            tree: TreeParams::default(),
            reps: 50,
            w: 0.5,
            beta: 0.1,
            timing: TimingMode::Model,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceConfig {
    pub population: VarianceParams,
    pub n: usize,
    pub reps: usize,
}

impl Default for VarianceConfig {
    fn default() -> Self {
        Self {
            population: VarianceParams::default(),
            n: 100,
            reps: 200,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::input(format!("cannot read config {}: {}", p.display(), e)))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::input(format!("invalid config {}: {}", p.display(), e)))
            }
        }
    }

    /// Hex SHA-256 of the canonical JSON of the effective configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{:02x}", b))
            .collect()
    }
}
