//! Run configuration: one structured file drives the whole pipeline.
//!
//! The `[hyper]` section uses the estimator's parameter names verbatim
//! (lambda, C, K, K_p, K_s, gamma, epsilon, v_p, v_a, v_m, alpha, delta_t,
//! N). Values outside the documented search ranges are rejected unless
//! `allow_out_of_range` is set.

use std::path::{Path, PathBuf};

use crate::backend::TrainConfig;
use crate::causal::HyperParams;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which list construction the pipeline runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Seeded random shuffle of the candidate pool.
    Random,
    /// The backend's own top-N list.
    Backend,
    /// Backend scores adjusted by weighted marginal treatment effects.
    Mtef,
    /// Slot allocation from the dose-response knapsack.
    Adrf,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Random => "random",
            Policy::Backend => "backend",
            Policy::Mtef => "mtef",
            Policy::Adrf => "adrf",
        }
    }

    /// Whether the policy consumes propensity/dose-response estimates.
    pub fn needs_estimates(&self) -> bool {
        matches!(self, Policy::Mtef | Policy::Adrf)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    /// Biased training log.
    pub train: PathBuf,
    /// Unbiased (randomized-exposure) log, split into validation and test.
    pub unbiased: PathBuf,
    /// Optional explicit item category labels, used for unexpected-recall.
    #[serde(default)]
    pub categories: Option<PathBuf>,
    /// Whether the interaction files carry an explicit position column.
    #[serde(default)]
    pub has_position: bool,
    /// Fraction of the unbiased part assigned to validation.
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_split_ratio() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSection {
    pub policy: Policy,
    #[serde(default = "default_cutoffs")]
    pub cutoffs: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Accept hyperparameters outside the documented search ranges.
    #[serde(default)]
    pub allow_out_of_range: bool,
    /// Use the aggregate L1 deviation budget instead of the per-category one.
    #[serde(default)]
    pub epsilon_aggregate: bool,
    /// Evaluate on the validation split instead of the test split.
    #[serde(default)]
    pub eval_on_valid: bool,
}

fn default_cutoffs() -> Vec<usize> {
    vec![10, 20]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub hyper: HyperParams,
    pub run: RunSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.allow_out_of_range {
            self.hyper.validate()?;
        } else {
            self.hyper.validate_ranges()?;
            if ![4, 24].contains(&self.train.neg_ratio) {
                return Err(Error::Config(format!(
                    "neg_ratio={} outside {{4, 24}}; set allow_out_of_range to override",
                    self.train.neg_ratio
                )));
            }
        }
        if self.train.d == 0 || self.train.d > 512 {
            return Err(Error::Config(format!(
                "embedding dimension must lie in 1..=512, got {}",
                self.train.d
            )));
        }
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            return Err(Error::Config(format!(
                "split_ratio must lie in (0,1), got {}",
                self.data.split_ratio
            )));
        }
        if self.run.cutoffs.is_empty() {
            return Err(Error::Config("at least one cutoff is required".into()));
        }
        let max_cutoff = *self.run.cutoffs.iter().max().unwrap();
        if self.hyper.n < max_cutoff {
            return Err(Error::Config(format!(
                "N={} is shorter than the largest cutoff {max_cutoff}",
                self.hyper.n
            )));
        }
        Ok(())
    }

    /// Applies one `key=value` override using the config file's key names.
    pub fn set_hyper(&mut self, key: &str, value: f64) -> Result<()> {
        let as_usize = |v: f64| -> Result<usize> {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Config(format!("{key} must be a non-negative integer, got {v}")));
            }
            Ok(v as usize)
        };
        match key {
            "lambda" => self.hyper.lambda = value,
            "C" => self.hyper.c = as_usize(value)?,
            "K" => self.hyper.k = as_usize(value)? as u32,
            "K_p" => self.hyper.k_p = as_usize(value)?,
            "K_s" => self.hyper.k_s = as_usize(value)?,
            "gamma" => self.hyper.gamma = value,
            "epsilon" => self.hyper.epsilon = as_usize(value)? as u32,
            "v_p" => self.hyper.v_p = value,
            "v_a" => self.hyper.v_a = value,
            "v_m" => self.hyper.v_m = value,
            "alpha" => self.hyper.alpha = value,
            "delta_t" => self.hyper.delta_t = as_usize(value)? as u32,
            "N" => self.hyper.n = as_usize(value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown hyperparameter `{other}` (expected one of lambda, C, K, K_p, K_s, \
                     gamma, epsilon, v_p, v_a, v_m, alpha, delta_t, N)"
                )))
            }
        }
        Ok(())
    }
}
