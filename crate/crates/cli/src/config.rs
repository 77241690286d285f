use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use trajval::experiment::ExperimentConfig;
use trajval::policy_gradient::VariantKind;

use crate::error::CliError;

/// A full run description. Files may set any subset of fields; the rest come from
/// the scaled (or, with `--paper-scale`, the full) defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Scaled,
    Paper,
}

/// Flags that change the configuration.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub paper_scale: bool,
    pub variants: Vec<VariantKind>,
}

impl Overrides {
    pub fn is_empty(&self) -> bool {
        self.config.is_none()
            && self.seed.is_none()
            && !self.paper_scale
            && self.variants.is_empty()
    }

    pub fn scale(&self) -> Scale {
        if self.paper_scale {
            Scale::Paper
        } else {
            Scale::Scaled
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

fn parse_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    } else {
        let t: toml::Value = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::to_value(t).map_err(|e| CliError::Config(e.to_string()))
    }
}

impl RunConfig {
    pub fn resolve(o: &Overrides) -> Result<Self, CliError> {
        let seed = o.seed.unwrap_or(0);
        let defaults = match o.scale() {
            Scale::Paper => ExperimentConfig::paper(seed),
            Scale::Scaled => ExperimentConfig::scaled(seed),
        };
        let mut value = serde_json::to_value(RunConfig {
            experiment: defaults,
            output_dir: None,
        })
        .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(path) = &o.config {
            merge(&mut value, parse_file(path)?);
        }
        let mut cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Config(format!("invalid configuration: {e}")))?;
        if let Some(s) = o.seed {
            cfg.experiment.seed = s;
        }
        if !o.variants.is_empty() {
            cfg.experiment.variants = o.variants.clone();
        }
        cfg.experiment.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical (key-sorted) JSON of the experiment section.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(&self.experiment).expect("config serializes");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

/// The headline hyperparameters, echoed into every manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    #[serde(rename = "H")]
    pub horizon: usize,
    pub sigma_a: f64,
    pub lr: f64,
    #[serde(rename = "M")]
    pub permutations: usize,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "N")]
    pub trajectories: usize,
    pub eval_rollouts: usize,
    pub proxy_fraction: f64,
}

impl Hyperparameters {
    pub fn of(c: &ExperimentConfig) -> Self {
        Self {
            horizon: c.system.horizon,
            sigma_a: c.policy.sigma_a,
            lr: c.charfn.eta,
            permutations: c.valuation.m,
            steps: c.charfn.steps,
            trajectories: c.dataset.n,
            eval_rollouts: c.charfn.n_eval_rollouts,
            proxy_fraction: c.charfn.proxy_fraction,
        }
    }
}
