//! Preference-pair export for external trainers.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dpo::{PairSink, PreferencePair};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::types::{Query, RewardBreakdown, Source, Trajectory};

/// Version of the judge rubric and its six-line output contract.
pub const RUBRIC_VERSION: &str = "rubric-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportedResponse {
    pub think: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob_behavior: Option<f64>,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_output: Option<String>,
}

impl ExportedResponse {
    fn from_trajectory(t: &Trajectory) -> Self {
        Self {
            think: t.think_text.clone(),
            answer: t.answer_text.clone(),
            path_id: t.path_id,
            logprob_behavior: t.logprob_behavior,
            source: t.source,
            raw_output: t.raw_output.clone(),
        }
    }

    fn to_trajectory(&self, query_id: &str) -> Trajectory {
        Trajectory {
            query_id: query_id.to_string(),
            path_id: self.path_id,
            think_text: self.think.clone(),
            answer_text: self.answer.clone(),
            logprob_behavior: self.logprob_behavior,
            source: self.source,
            raw_output: self.raw_output.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportRecord {
    pub query_id: String,
    pub prompt: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    pub chosen: ExportedResponse,
    pub rejected: ExportedResponse,
    pub reward_chosen: f64,
    pub reward_rejected: f64,
    #[serde(default)]
    pub breakdown_chosen: Option<RewardBreakdown>,
    #[serde(default)]
    pub breakdown_rejected: Option<RewardBreakdown>,
    pub rubric_version: String,
}

impl ExportRecord {
    pub fn new(query: &Query, pair: &PreferencePair) -> Result<Self> {
        if query.id != pair.query_id {
            return Err(Error::InvalidArgument(format!(
                "pair for {:?} exported against query {:?}",
                pair.query_id, query.id
            )));
        }
        if pair.reward_chosen.is_nan() || pair.reward_rejected.is_nan() || pair.reward_chosen < pair.reward_rejected {
            return Err(Error::InvalidArgument(format!(
                "pair for {:?} has chosen reward {} below rejected {}",
                pair.query_id, pair.reward_chosen, pair.reward_rejected
            )));
        }
        Ok(Self {
            query_id: query.id.clone(),
            prompt: query.prompt.clone(),
            image_ref: query.image_ref.clone(),
            chosen: ExportedResponse::from_trajectory(&pair.chosen),
            rejected: ExportedResponse::from_trajectory(&pair.rejected),
            reward_chosen: pair.reward_chosen,
            reward_rejected: pair.reward_rejected,
            breakdown_chosen: pair.breakdown_chosen,
            breakdown_rejected: pair.breakdown_rejected,
            rubric_version: RUBRIC_VERSION.to_string(),
        })
    }

    pub fn to_pair(&self) -> PreferencePair {
        PreferencePair {
            query_id: self.query_id.clone(),
            chosen: self.chosen.to_trajectory(&self.query_id),
            rejected: self.rejected.to_trajectory(&self.query_id),
            reward_chosen: self.reward_chosen,
            reward_rejected: self.reward_rejected,
            breakdown_chosen: self.breakdown_chosen,
            breakdown_rejected: self.breakdown_rejected,
        }
    }
}

/// Append-only writer; every record goes out as one whole, flushed line.
pub struct PairExporter {
    path: PathBuf,
    file: File,
    queries: BTreeMap<String, Query>,
    written: usize,
}

impl PairExporter {
    pub fn open(path: &Path, queries: &[Query]) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            file: jsonl::open_append(path)?,
            queries: queries.iter().map(|q| (q.id.clone(), q.clone())).collect(),
            written: 0,
        })
    }

    pub fn written(&self) -> usize {
        self.written
    }
}

impl PairSink for PairExporter {
    fn write_pair(&mut self, pair: &PreferencePair) -> Result<()> {
        let query = self
            .queries
            .get(&pair.query_id)
            .ok_or_else(|| Error::UnknownQuery(pair.query_id.clone()))?;
        let mut line = serde_json::to_string(&ExportRecord::new(query, pair)?)
            .map_err(|e| Error::InvalidArgument(format!("pair serialization: {e}")))?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        self.written += 1;
        Ok(())
    }
}

/// Writes every pair and returns the count.
pub fn export_pairs<'a>(pairs: impl IntoIterator<Item = &'a PreferencePair>, queries: &[Query], path: &Path) -> Result<usize> {
    let mut ex = PairExporter::open(path, queries)?;
    for p in pairs {
        ex.write_pair(p)?;
    }
    Ok(ex.written())
}

pub fn read_pairs(path: &Path) -> Result<Vec<ExportRecord>> {
    Ok(jsonl::read_records(path)?.into_iter().map(|(_, r)| r).collect())
}
