//! Format, outcome and thinking rewards, and their blends.
//!
//! Stage I ranks a group by `format + answer` (values in {0, 1, 2}); Stage II
//! ranks by the composite `λ·thinking + (1−λ)·outcome` (values in [0, 1]).

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::synthenv::{label_of, SyntheticEnv};
use crate::types::{Query, RewardBreakdown, TaskKind, Trajectory};

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

/// Relative tolerance for numeric answer equality.
pub const NUMERIC_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCompletion {
    pub think: String,
    pub answer: String,
    pub well_formed: bool,
}

/// Splits a completion into think and answer segments.
///
/// `well_formed` holds iff the text is exactly one `<think>` segment followed
/// by exactly one `<answer>` segment, both non-blank, with only whitespace
/// around them. Otherwise the segments are extracted best-effort: whatever
/// sits inside the tags when present, the whole text as the answer when not.
pub fn parse_completion(text: &str) -> ParsedCompletion {
    let between = |open: &str, close: &str| -> Option<(usize, usize)> {
        let s = text.find(open)? + open.len();
        let e = text[s..].find(close)? + s;
        Some((s, e))
    };
    let think = between(THINK_OPEN, THINK_CLOSE);
    let answer = between(ANSWER_OPEN, ANSWER_CLOSE);

    let once = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE]
        .iter()
        .all(|tag| text.matches(tag).count() == 1);
    let well_formed = once
        && match (think, answer) {
            (Some((ts, te)), Some((as_, ae))) if te + THINK_CLOSE.len() <= as_ - ANSWER_OPEN.len() => {
                let pre = &text[..ts - THINK_OPEN.len()];
                let mid = &text[te + THINK_CLOSE.len()..as_ - ANSWER_OPEN.len()];
                let post = &text[ae + ANSWER_CLOSE.len()..];
                pre.trim().is_empty()
                    && mid.trim().is_empty()
                    && post.trim().is_empty()
                    && !text[ts..te].trim().is_empty()
                    && !text[as_..ae].trim().is_empty()
            }
            _ => false,
        };

    ParsedCompletion {
        think: think.map(|(s, e)| text[s..e].trim().to_string()).unwrap_or_default(),
        answer: answer
            .map(|(s, e)| text[s..e].trim().to_string())
            .unwrap_or_else(|| text.trim().to_string()),
        well_formed,
    }
}

pub fn render_completion(think: &str, answer: &str) -> String {
    format!("{THINK_OPEN}{think}{THINK_CLOSE}{ANSWER_OPEN}{answer}{ANSWER_CLOSE}")
}

pub fn format_reward_text(text: &str) -> f64 {
    if parse_completion(text).well_formed {
        1.0
    } else {
        0.0
    }
}

/// Synthetic trajectories read the path's `well_formed` label; everything
/// else is checked against the template grammar.
pub fn format_reward(trajectory: &Trajectory, env: Option<&SyntheticEnv>) -> Result<f64> {
    if let (Some(env), Some(_)) = (env, trajectory.path_id) {
        let label = label_of(env, trajectory)?;
        return Ok(if label.well_formed { 1.0 } else { 0.0 });
    }
    Ok(match &trajectory.raw_output {
        Some(raw) => format_reward_text(raw),
        None => format_reward_text(&render_completion(&trajectory.think_text, &trajectory.answer_text)),
    })
}

fn numbers_match(a: &str, b: &str) -> Option<bool> {
    let x: f64 = a.parse().ok()?;
    let y: f64 = b.parse().ok()?;
    if !(x.is_finite() && y.is_finite()) {
        return Some(false);
    }
    Some(x == y || (x - y).abs() <= NUMERIC_RTOL * x.abs().max(y.abs()))
}

/// First standalone option label in `answer`; at one position the longest
/// matching label wins.
pub fn extract_option<'a>(answer: &str, options: &'a [String]) -> Option<&'a str> {
    let bytes = answer.as_bytes();
    let boundary = |i: usize| -> bool {
        i == 0
            || i >= bytes.len()
            || !answer[..i]
                .chars()
                .next_back()
                .map(char::is_alphanumeric)
                .unwrap_or(false)
    };
    let after_ok = |end: usize| -> bool {
        end >= bytes.len()
            || !answer[end..]
                .chars()
                .next()
                .map(char::is_alphanumeric)
                .unwrap_or(false)
    };
    for (i, _) in answer.char_indices() {
        if !boundary(i) {
            continue;
        }
        let best = options
            .iter()
            .filter(|o| !o.is_empty() && answer[i..].starts_with(o.as_str()) && after_ok(i + o.len()))
            .max_by_key(|o| o.len());
        if let Some(o) = best {
            return Some(o.as_str());
        }
    }
    None
}

pub fn outcome_reward(trajectory: &Trajectory, query: &Query) -> f64 {
    let answer = trajectory.answer_text.trim();
    let reference = query.reference_answer.trim();
    let hit = match query.task_kind {
        TaskKind::Numeric => numbers_match(answer, reference).unwrap_or(answer == reference),
        TaskKind::MultipleChoice => {
            let options = query.options.as_deref().unwrap_or(&[]);
            extract_option(answer, options) == Some(reference)
        }
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Scores reasoning quality of a trajectory's think segment.
pub trait ThinkingJudge: Send + Sync {
    fn score(&self, query: &Query, trajectory: &Trajectory) -> Result<f64>;
}

#[derive(Clone)]
pub enum ThinkingRewardProvider {
    /// clamp(q + N(0, σ²), 0, 1) from the path's latent quality.
    SyntheticOracle { noise_sigma: f64 },
    RemoteJudge(Arc<dyn ThinkingJudge>),
}

impl std::fmt::Debug for ThinkingRewardProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::SyntheticOracle { noise_sigma } => {
                f.debug_struct("SyntheticOracle").field("noise_sigma", noise_sigma).finish()
            }
            Self::RemoteJudge(_) => f.write_str("RemoteJudge"),
        }
    }
}

pub fn thinking_reward<R: Rng + ?Sized>(
    provider: &ThinkingRewardProvider,
    query: &Query,
    trajectory: &Trajectory,
    env: Option<&SyntheticEnv>,
    rng: &mut R,
) -> Result<f64> {
    let raw = match provider {
        ThinkingRewardProvider::SyntheticOracle { noise_sigma } => {
            let env = env.ok_or_else(|| {
                Error::Unsupported("synthetic thinking oracle needs a synthetic env".into())
            })?;
            let q = label_of(env, trajectory)?.quality;
            if *noise_sigma > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                q + noise_sigma * z
            } else {
                q
            }
        }
        ThinkingRewardProvider::RemoteJudge(judge) => judge.score(query, trajectory)?,
    };
    if !raw.is_finite() {
        return Err(Error::Scoring(format!("non-finite thinking score {raw}")));
    }
    Ok(raw.clamp(0.0, 1.0))
}

/// λ·R_t + (1−λ)·R_o.
pub fn composite_reward(thinking: f64, outcome: f64, lambda: f64) -> Result<f64> {
    for (name, v) in [("thinking", thinking), ("outcome", outcome), ("lambda", lambda)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{name} reward input {v} outside [0, 1]")));
        }
    }
    Ok((lambda * thinking + (1.0 - lambda) * outcome).clamp(0.0, 1.0))
}

/// Stage-I group reward: format + answer.
pub fn stage1_reward(format: f64, outcome: f64) -> f64 {
    format + outcome
}

/// Bundles what Stage II needs to score a trajectory.
#[derive(Debug, Clone)]
pub struct Scorer<'a> {
    pub env: Option<&'a SyntheticEnv>,
    pub provider: &'a ThinkingRewardProvider,
    pub lambda: f64,
}

impl Scorer<'_> {
    pub fn score<R: Rng + ?Sized>(&self, query: &Query, trajectory: &Trajectory, rng: &mut R) -> Result<RewardBreakdown> {
        let format = format_reward(trajectory, self.env)?;
        let outcome = outcome_reward(trajectory, query);
        let thinking = thinking_reward(self.provider, query, trajectory, self.env, rng)?;
        RewardBreakdown::new(format, outcome, thinking, self.lambda)
    }
}
