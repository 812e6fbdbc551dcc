//! Rubric verdict parsing and the remote thinking judge.

use serde::{Deserialize, Serialize};

use super::chat::ChatClient;
use super::prompts::{judge_prompt, JUDGE_KEYS};
use crate::error::{Error, Result};
use crate::reward::ThinkingJudge;
use crate::types::{Query, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    /// LS, EI, CR, LC, RD in that order.
    pub sub_scores: [f64; 5],
    /// Mean of the five sub-scores.
    pub aggregate: f64,
    /// Response text, with any clamping or inconsistency notes appended.
    pub raw: String,
}

impl JudgeVerdict {
    pub fn score(&self, key: &str) -> Option<f64> {
        JUDGE_KEYS.iter().position(|k| *k == key).map(|i| self.sub_scores[i])
    }
}

fn line_value<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let l = line.trim().trim_start_matches(['-', '*', ' ']);
    let rest = l.strip_prefix(key)?;
    let rest = rest.trim_start_matches('*').trim_start();
    Some(rest.strip_prefix(':')?.trim().trim_end_matches('*').trim())
}

/// Reads the five sub-score lines; the aggregate is always recomputed.
pub fn parse_verdict(text: &str) -> Result<JudgeVerdict> {
    let mut notes = Vec::new();
    let mut scores = [0.0; 5];
    for (i, key) in JUDGE_KEYS.iter().enumerate() {
        let raw = text
            .lines()
            .find_map(|l| line_value(l, key))
            .ok_or_else(|| Error::MalformedResponse(format!("judge output lacks a {key} line")))?;
        let v: f64 = raw
            .parse()
            .map_err(|_| Error::MalformedResponse(format!("judge {key} value {raw:?} is not a number")))?;
        if !v.is_finite() {
            return Err(Error::MalformedResponse(format!("judge {key} value is not finite")));
        }
        let c = v.clamp(0.0, 1.0);
        if c != v {
            notes.push(format!("[clamped {key} {v} -> {c}]"));
        }
        scores[i] = c;
    }
    let aggregate = scores.iter().sum::<f64>() / 5.0;
    if let Some(f) = text.lines().find_map(|l| line_value(l, "FINAL")) {
        match f.parse::<f64>() {
            Ok(v) if (v - aggregate).abs() <= 1e-6 => {}
            _ => notes.push(format!("[FINAL {f} ignored; mean is {aggregate}]")),
        }
    }
    let mut raw = text.to_string();
    for n in notes {
        raw.push('\n');
        raw.push_str(&n);
    }
    Ok(JudgeVerdict {
        sub_scores: scores,
        aggregate,
        raw,
    })
}

/// Thinking-reward provider backed by a chat endpoint.
#[derive(Debug, Clone)]
pub struct RemoteJudge {
    pub client: ChatClient,
}

impl RemoteJudge {
    /// Sends the rubric; one retry when the reply does not parse.
    pub fn judge(&self, query: &Query, trajectory: &Trajectory) -> Result<JudgeVerdict> {
        let req = self.client.request(&judge_prompt(query, &trajectory.think_text), 1);
        let mut last = None;
        for _ in 0..2 {
            let resp = self.client.complete(&req)?;
            match parse_verdict(&resp.texts[0]) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    tracing::warn!(query = %query.id, error = %e, "unparseable judge output");
                    last = Some(e);
                }
            }
        }
        Err(Error::Scoring(format!("judge output malformed after retry: {}", last.expect("two attempts ran"))))
    }
}

impl ThinkingJudge for RemoteJudge {
    fn score(&self, query: &Query, trajectory: &Trajectory) -> Result<f64> {
        self.judge(query, trajectory).map(|v| v.aggregate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones() {
        let v = parse_verdict("LS: 1\nEI: 1\nCR: 1\nLC: 1\nRD: 1\nFINAL: 1").unwrap();
        assert_eq!(v.aggregate, 1.0);
    }

    #[test]
    fn mean_of_sub_scores() {
        let v = parse_verdict("LS: 1.0\nEI: 0.8\nCR: 0.8\nLC: 1.0\nRD: 0.4\nFINAL: 0.8").unwrap();
        assert!((v.aggregate - 0.8).abs() < 1e-9);
        assert_eq!(v.score("RD"), Some(0.4));
        assert!(!v.raw.contains("ignored"));
    }

    #[test]
    fn final_line_is_not_trusted() {
        let v = parse_verdict("LS: 0.5\nEI: 0.5\nCR: 0.5\nLC: 0.5\nRD: 0.5\nFINAL: 0.9").unwrap();
        assert_eq!(v.aggregate, 0.5);
        assert!(v.raw.contains("FINAL 0.9 ignored"));
    }

    #[test]
    fn out_of_range_clamped_and_flagged() {
        let v = parse_verdict("LS: 1.4\nEI: -0.2\nCR: 0.5\nLC: 0.5\nRD: 0.5").unwrap();
        assert_eq!(v.sub_scores[..2], [1.0, 0.0]);
        assert!(v.raw.contains("[clamped LS 1.4 -> 1]"));
        assert!(v.raw.contains("[clamped EI -0.2 -> 0]"));
    }

    #[test]
    fn tolerant_of_markdown() {
        let v = parse_verdict("Here you go:\n- **LS**: 0.9\n- EI: 0.7\n* CR : 0.6\nLC:1\nRD: 0.3\n").unwrap();
        assert_eq!(v.sub_scores, [0.9, 0.7, 0.6, 1.0, 0.3]);
    }

    #[test]
    fn missing_line_is_error() {
        assert!(matches!(
            parse_verdict("LS: 1\nEI: 1\nCR: 1\nLC: 1\nFINAL: 1"),
            Err(Error::MalformedResponse(_))
        ));
        assert!(parse_verdict("LS: high\nEI: 1\nCR: 1\nLC: 1\nRD: 1").is_err());
    }
}
