//! Metric report rows, one JSON object per logged step.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::jsonl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Grpo,
    Pso,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Cumulative per-query updates at the time of logging.
    pub step: u64,
    pub stage: Stage,
    pub mean_composite: f64,
    pub mean_outcome: f64,
    pub mean_thinking: f64,
    pub pass_at_1: f64,
    pub pass_at_k: f64,
    pub k: usize,
    pub kl_to_ref: f64,
    /// Policy-expected reasoning quality over all queries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_thinking: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
}

pub fn write_report(path: &Path, records: &[MetricRecord]) -> Result<usize> {
    jsonl::write_records(path, records)
}

pub fn read_report(path: &Path) -> Result<Vec<MetricRecord>> {
    Ok(jsonl::read_records(path)?.into_iter().map(|(_, r)| r).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.jsonl");
        let rows = vec![
            MetricRecord {
                step: 50,
                stage: Stage::Grpo,
                mean_composite: 0.5,
                mean_outcome: 0.4,
                mean_thinking: 0.6,
                pass_at_1: 0.41,
                pass_at_k: 0.98,
                k: 8,
                kl_to_ref: 0.01,
                expected_thinking: Some(0.55),
                query_id: None,
                loss: None,
                margin: None,
            },
            MetricRecord {
                step: 51,
                stage: Stage::Pso,
                mean_composite: 0.7,
                mean_outcome: 0.9,
                mean_thinking: 0.5,
                pass_at_1: 0.42,
                pass_at_k: 0.98,
                k: 8,
                kl_to_ref: 0.0,
                expected_thinking: None,
                query_id: Some("q000".into()),
                loss: Some(std::f64::consts::LN_2),
                margin: Some(0.0),
            },
        ];
        write_report(&p, &rows).unwrap();
        assert_eq!(read_report(&p).unwrap(), rows);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().next().unwrap().contains(r#""stage":"grpo""#));
    }
}
