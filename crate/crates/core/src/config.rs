//! Run configuration and the on-disk config file (`[run]`, `[env]`, `[mode]`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthenv::EnvSpec;

/// How retrieved negatives shape fresh sampling in synthetic mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvoidanceMode {
    /// Subtract `avoidance_penalty` from the negatives' logits while sampling.
    Penalty,
    /// Exclude the negatives' paths from sampling entirely.
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// G: trajectories sampled per query and step.
    pub group_size: usize,
    /// Weight of the thinking reward in the composite reward.
    pub lambda: f64,
    /// Memory admission threshold (strict `<`).
    pub tau: f64,
    /// C: per-query memory capacity.
    pub memory_capacity: usize,
    /// n: negatives retrieved per query visit.
    pub retrieve_n: usize,
    pub beta_dpo: f64,
    pub beta_kl: f64,
    /// Stage-I (GRPO) step size.
    pub learning_rate: f64,
    /// Stage-II (DPO) step size.
    pub dpo_learning_rate: f64,
    /// E: Stage-II epochs.
    pub epochs: usize,
    /// Stage-I passes over the dataset.
    pub grpo_iterations: usize,
    pub seed: u64,

    pub disable_thinking_reward: bool,
    pub disable_memory: bool,
    pub offline_dpo_mode: bool,

    /// Noise of the synthetic thinking-reward oracle.
    pub thinking_noise_sigma: f64,
    pub avoidance: AvoidanceMode,
    pub avoidance_penalty: f64,
    /// Add retrieved negatives to the candidate pool as `replayed_negative`.
    pub inject_negatives: bool,
    /// Re-score replayed negatives instead of reusing their stored reward.
    pub rescore_replayed: bool,
    /// Store only the lowest-reward sub-threshold candidate per group.
    pub lowest_only: bool,
    /// Refresh the Stage-II reference policy every M updates (0 = frozen).
    pub ref_refresh_every: usize,
    /// Optional PPO-style ratio clip for the GRPO surrogate.
    pub grpo_clip: Option<f64>,

    /// k values reported by `eval`.
    pub eval_ks: Vec<usize>,
    /// Samples per query for the unbiased pass@k estimator.
    pub eval_samples: usize,
    /// Monte-Carlo trials per query for pass@k.
    pub eval_trials: usize,
    pub histogram_bins: usize,
    /// Trajectories per query for the reward-distribution view.
    pub distribution_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            lambda: 0.5,
            tau: 0.5,
            memory_capacity: 4,
            retrieve_n: 1,
            beta_dpo: 0.1,
            beta_kl: 0.04,
            learning_rate: 0.5,
            dpo_learning_rate: 10.0,
            epochs: 3,
            grpo_iterations: 30,
            seed: 0,
            disable_thinking_reward: false,
            disable_memory: false,
            offline_dpo_mode: false,
            thinking_noise_sigma: 0.05,
            avoidance: AvoidanceMode::Penalty,
            avoidance_penalty: 2.0,
            inject_negatives: false,
            rescore_replayed: false,
            lowest_only: false,
            ref_refresh_every: 0,
            grpo_clip: None,
            eval_ks: vec![1, 2, 4, 8, 16],
            eval_samples: 32,
            eval_trials: 2000,
            histogram_bins: 20,
            distribution_samples: 64,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("lambda", self.lambda),
            ("tau", self.tau),
            ("beta_dpo", self.beta_dpo),
            ("beta_kl", self.beta_kl),
            ("learning_rate", self.learning_rate),
            ("dpo_learning_rate", self.dpo_learning_rate),
            ("thinking_noise_sigma", self.thinking_noise_sigma),
            ("avoidance_penalty", self.avoidance_penalty),
        ];
        for (key, v) in finite {
            if !v.is_finite() {
                return Err(Error::config(key, "must be finite"));
            }
        }
        let unit = |key: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(key, format!("must lie in [0, 1], got {v}")))
            }
        };
        unit("lambda", self.lambda)?;
        unit("tau", self.tau)?;
        let positive = [
            ("beta_dpo", self.beta_dpo),
            ("learning_rate", self.learning_rate),
            ("dpo_learning_rate", self.dpo_learning_rate),
        ];
        for (key, v) in positive {
            if v <= 0.0 {
                return Err(Error::config(key, format!("must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("beta_kl", self.beta_kl),
            ("thinking_noise_sigma", self.thinking_noise_sigma),
            ("avoidance_penalty", self.avoidance_penalty),
        ];
        for (key, v) in non_negative {
            if v < 0.0 {
                return Err(Error::config(key, format!("must be non-negative, got {v}")));
            }
        }
        if self.group_size < 2 {
            return Err(Error::config("group_size", "must be at least 2"));
        }
        if self.memory_capacity == 0 {
            return Err(Error::config("memory_capacity", "must be positive"));
        }
        if self.retrieve_n > self.memory_capacity {
            return Err(Error::config(
                "retrieve_n",
                format!(
                    "must not exceed memory_capacity ({} > {})",
                    self.retrieve_n, self.memory_capacity
                ),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if let Some(clip) = self.grpo_clip {
            if !(clip.is_finite() && clip > 0.0) {
                return Err(Error::config("grpo_clip", "must be a positive finite number"));
            }
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::config("eval_ks", "must be a non-empty list of positive k"));
        }
        if self.eval_trials == 0 {
            return Err(Error::config("eval_trials", "must be positive"));
        }
        let max_k = self.eval_ks.iter().copied().max().unwrap_or(1);
        if self.eval_samples < max_k {
            return Err(Error::config(
                "eval_samples",
                format!("must be at least the largest k ({max_k})"),
            ));
        }
        if self.histogram_bins == 0 {
            return Err(Error::config("histogram_bins", "must be positive"));
        }
        if self.distribution_samples == 0 {
            return Err(Error::config("distribution_samples", "must be positive"));
        }
        Ok(())
    }

    /// λ as actually applied: zero when the thinking reward is ablated.
    pub fn effective_lambda(&self) -> f64 {
        if self.disable_thinking_reward {
            0.0
        } else {
            self.lambda
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Synthetic,
    Remote,
}

/// The `[mode]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeConfig {
    pub kind: ModeKind,
    /// Dataset file for remote runs.
    pub dataset: Option<String>,
    /// Chat-completion endpoint; `PATHSEL_ENDPOINT` overrides.
    pub endpoint: Option<String>,
    pub model: String,
    /// Judge model; defaults to `model` when unset.
    pub judge_model: Option<String>,
    pub temperature: f64,
    pub max_concurrency: usize,
    pub timeout_secs: u64,
    /// Write preference pairs during Stage II.
    pub export_pairs: bool,
}

impl Default for ModeConfig {
    fn default() -> Self {
        Self {
            kind: ModeKind::Synthetic,
            dataset: None,
            endpoint: None,
            model: "policy".to_string(),
            judge_model: None,
            temperature: 1.0,
            max_concurrency: 4,
            timeout_secs: 60,
            export_pairs: false,
        }
    }
}

/// Entire config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub run: RunConfig,
    pub env: EnvSpec,
    pub mode: ModeConfig,
}

impl FileConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: FileConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let key = offending_key(&message).unwrap_or_else(|| "<file>".to_string());
            Error::config(key, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.env.validate()?;
        if self.mode.max_concurrency == 0 {
            return Err(Error::config("max_concurrency", "must be positive"));
        }
        if !(self.mode.temperature.is_finite() && self.mode.temperature >= 0.0) {
            return Err(Error::config("temperature", "must be finite and non-negative"));
        }
        Ok(())
    }
}

fn offending_key(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}
