//! Shared domain types.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Numeric,
    MultipleChoice,
}

/// One problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    pub id: String,
    pub prompt: String,
    /// Opaque image reference (path or URL). Never fetched or decoded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub task_kind: TaskKind,
    pub reference_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
}

impl Query {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::InvalidQuery {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.is_empty() {
            return Err(bad("empty id"));
        }
        match self.task_kind {
            TaskKind::MultipleChoice => {
                let options = self
                    .options
                    .as_ref()
                    .ok_or_else(|| bad("multiple_choice query without options"))?;
                if options.len() < 2 {
                    return Err(bad("multiple_choice query needs at least 2 options"));
                }
                if !options.iter().any(|o| o == &self.reference_answer) {
                    return Err(bad("reference_answer is not one of the options"));
                }
            }
            TaskKind::Numeric => {
                if self.options.is_some() {
                    return Err(bad("options are only allowed for multiple_choice"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    FreshSample,
    ReplayedNegative,
}

/// One sampled reasoning attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query_id: String,
    /// Index into the query's path space (synthetic mode only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_id: Option<usize>,
    pub think_text: String,
    pub answer_text: String,
    /// Log-probability under the sampling policy. `None` for remote
    /// completions, where the endpoint reports no log-probabilities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob_behavior: Option<f64>,
    pub source: Source,
    /// Raw completion text as returned by a remote generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_output: Option<String>,
}

/// Per-trajectory reward channels and their blend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format_reward: f64,
    pub outcome_reward: f64,
    pub thinking_reward: f64,
    pub composite: f64,
    pub lambda_used: f64,
}

impl RewardBreakdown {
    /// Builds a breakdown; the composite is computed, never supplied.
    pub fn new(format: f64, outcome: f64, thinking: f64, lambda: f64) -> Result<Self> {
        let composite = crate::reward::composite_reward(thinking, outcome, lambda)?;
        for (name, v) in [("format_reward", format), ("outcome_reward", outcome)] {
            if v != 0.0 && v != 1.0 {
                return Err(Error::InvalidArgument(format!("{name} must be 0 or 1, got {v}")));
            }
        }
        Ok(Self {
            format_reward: format,
            outcome_reward: outcome,
            thinking_reward: thinking,
            composite,
            lambda_used: lambda,
        })
    }

    /// True when the stored composite is exactly what the blend recomputes.
    pub fn is_consistent(&self) -> bool {
        crate::reward::composite_reward(self.thinking_reward, self.outcome_reward, self.lambda_used)
            .map(|c| c == self.composite)
            .unwrap_or(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mc(options: &[&str], reference: &str) -> Query {
        Query {
            id: "q".into(),
            prompt: "p".into(),
            image_ref: None,
            task_kind: TaskKind::MultipleChoice,
            reference_answer: reference.into(),
            options: Some(options.iter().map(|s| s.to_string()).collect()),
        }
    }

    #[test]
    fn multiple_choice_needs_two_options() {
        assert!(mc(&["A"], "A").validate().is_err());
        assert!(mc(&["A", "B"], "B").validate().is_ok());
        assert!(mc(&["A", "B"], "C").validate().is_err());
    }

    #[test]
    fn breakdown_composite_is_recomputable() {
        let b = RewardBreakdown::new(1.0, 1.0, 0.8, 0.5).unwrap();
        assert_eq!(b.composite, 0.9);
        assert!(b.is_consistent());
        let mut tampered = b;
        tampered.composite = 0.91;
        assert!(!tampered.is_consistent());
    }

    #[test]
    fn breakdown_rejects_non_binary_outcome() {
        assert!(RewardBreakdown::new(1.0, 0.5, 0.8, 0.5).is_err());
    }
}
