//! Run configuration: a single TOML document holding every tunable, with
//! field-path validation messages.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{TaskConfig, TaskError};
use crate::forest::TokenId;
use crate::objective::SurrogateMode;
use crate::policy::FeatureKind;
use crate::sampler::{AnnealCadence, BranchPolicy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Task(#[from] TaskError),
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        rate: f64,
    },
    /// Linear ramp over `warmup_steps`, then cosine decay to `lr_min`.
    WarmupCosine {
        warmup_steps: usize,
        lr_peak: f64,
        lr_min: f64,
    },
}

impl LrSchedule {
    pub fn rate_at(&self, step: usize, total_steps: usize) -> f64 {
        match *self {
            LrSchedule::Constant { rate } => rate,
            LrSchedule::WarmupCosine {
                warmup_steps,
                lr_peak,
                lr_min,
            } => {
                if step < warmup_steps {
                    lr_peak * (step + 1) as f64 / warmup_steps as f64
                } else {
                    let tail = (total_steps.saturating_sub(warmup_steps)).max(1) as f64;
                    let progress = (step - warmup_steps) as f64 / tail;
                    lr_min
                        + 0.5 * (lr_peak - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        match *self {
            LrSchedule::Constant { rate } => {
                if rate <= 0.0 {
                    return Err(invalid("lr.rate", "must be positive"));
                }
            }
            LrSchedule::WarmupCosine {
                warmup_steps,
                lr_peak,
                lr_min,
            } => {
                if warmup_steps == 0 {
                    return Err(invalid("lr.warmup_steps", "must be at least 1"));
                }
                if lr_peak <= 0.0 || lr_min <= 0.0 {
                    return Err(invalid("lr.lr_peak", "rates must be positive"));
                }
                if lr_min > lr_peak {
                    return Err(invalid("lr.lr_min", "must not exceed lr_peak"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub k: usize,
    pub m: usize,
    #[serde(default = "default_tau_init")]
    pub tau_init: f64,
    #[serde(default = "default_tau_floor")]
    pub tau_floor: f64,
    #[serde(default = "default_tau_decrement")]
    pub tau_decrement: f64,
    #[serde(default = "default_cadence")]
    pub anneal_cadence: AnnealCadence,
    #[serde(default = "default_branch_factor")]
    pub branch_factor: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    /// Extra token ids on which branching is suppressed (the task's
    /// structural tokens are added automatically).
    #[serde(default)]
    pub no_branch_tokens: Vec<u16>,
}

fn default_tau_init() -> f64 {
    1.4
}
fn default_tau_floor() -> f64 {
    1.0
}
fn default_tau_decrement() -> f64 {
    0.05
}
fn default_cadence() -> AnnealCadence {
    AnnealCadence::PerEpoch
}
fn default_branch_factor() -> usize {
    2
}
fn default_top_k() -> usize {
    20
}
fn default_top_p() -> f64 {
    0.7
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_feature_kind")]
    pub feature_kind: FeatureKind,
}

fn default_window() -> usize {
    3
}
fn default_feature_kind() -> FeatureKind {
    FeatureKind::Positional
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: SurrogateMode,
    pub seed: u64,
    pub total_steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Logical data epochs the run spans; drives the per-epoch anneal cadence.
    #[serde(default = "one")]
    pub epochs: usize,
    /// Gradient passes per sampled batch; values > 1 are the only way
    /// ratios deviate from 1 during training.
    #[serde(default = "one")]
    pub reuse_epochs: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub parallel: bool,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub kl_coeff: f64,
    /// Held-out instances for checkpoint evaluation.
    #[serde(default = "default_eval_instances")]
    pub eval_instances: usize,
    /// Optional early stop once a checkpoint reaches this greedy accuracy.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    /// Stall tokens tracked as a diagnostic; empty disables the metric.
    #[serde(default)]
    pub stall_tokens: Vec<u16>,
    pub lr: LrSchedule,
    pub rollout: RolloutConfig,
    pub task: TaskConfig,
    pub policy: PolicyConfig,
}

fn one() -> usize {
    1
}
fn default_batch_size() -> usize {
    4
}
fn default_checkpoint_every() -> usize {
    5
}
fn default_epsilon() -> f64 {
    0.2
}
fn default_delta() -> f64 {
    1e-8
}
fn default_eval_instances() -> usize {
    200
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: RunConfig = toml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.total_steps < 1 {
            return Err(invalid("total_steps", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if self.epochs < 1 {
            return Err(invalid("epochs", "must be at least 1"));
        }
        if self.reuse_epochs < 1 {
            return Err(invalid("reuse_epochs", "must be at least 1"));
        }
        if self.checkpoint_every < 1 {
            return Err(invalid("checkpoint_every", "must be at least 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(invalid("epsilon", "must be in (0, 1)"));
        }
        if self.delta < 0.0 {
            return Err(invalid("delta", "must be non-negative"));
        }
        if self.kl_coeff < 0.0 {
            return Err(invalid("kl_coeff", "must be non-negative"));
        }
        if self.eval_instances < 1 {
            return Err(invalid("eval_instances", "must be at least 1"));
        }
        self.lr.validate()?;
        let r = &self.rollout;
        if r.k < 2 {
            return Err(invalid("rollout.k", "must be at least 2 (group normalization)"));
        }
        if r.m < 1 {
            return Err(invalid("rollout.m", "must be at least 1"));
        }
        if r.k % r.m != 0 {
            return Err(invalid(
                "rollout.m",
                format!("k must be divisible by m (k = {}, m = {})", r.k, r.m),
            ));
        }
        if r.branch_factor < 2 {
            return Err(invalid("rollout.branch_factor", "must be at least 2"));
        }
        if r.top_k < 2 {
            return Err(invalid("rollout.top_k", "must be at least 2"));
        }
        if !(r.top_p > 0.0 && r.top_p <= 1.0) {
            return Err(invalid("rollout.top_p", "must be in (0, 1]"));
        }
        if !(r.tau_floor <= r.tau_init) {
            return Err(invalid("rollout.tau_floor", "must not exceed tau_init"));
        }
        if r.tau_decrement < 0.0 {
            return Err(invalid("rollout.tau_decrement", "must be non-negative"));
        }
        if self.policy.window < 1 {
            return Err(invalid("policy.window", "must be at least 1"));
        }
        self.task.validate()?;
        for &t in self.rollout.no_branch_tokens.iter().chain(&self.stall_tokens) {
            if t as usize >= self.task.vocab_size {
                return Err(invalid(
                    "rollout.no_branch_tokens",
                    format!("token id {t} outside vocabulary of size {}", self.task.vocab_size),
                ));
            }
        }
        Ok(())
    }

    /// The branch policy at its initial threshold, with the task's EOS added
    /// to the no-branch list (branching on a terminal token is useless).
    pub fn branch_policy(&self) -> BranchPolicy {
        let vocab = self.task.vocab();
        let mut no_branch: BTreeSet<TokenId> =
            self.rollout.no_branch_tokens.iter().map(|&t| TokenId(t)).collect();
        no_branch.insert(vocab.eos());
        BranchPolicy {
            tau: self.rollout.tau_init,
            tau_init: self.rollout.tau_init,
            tau_floor: self.rollout.tau_floor,
            tau_decrement: self.rollout.tau_decrement,
            anneal_cadence: self.rollout.anneal_cadence,
            branch_factor: self.rollout.branch_factor,
            no_branch_tokens: no_branch,
            delimiter_tokens: BTreeSet::from([vocab.delimiter()]),
            top_k: self.rollout.top_k,
            top_p: self.rollout.top_p,
        }
    }

    pub fn stall_token_set(&self) -> BTreeSet<TokenId> {
        self.stall_tokens.iter().map(|&t| TokenId(t)).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
