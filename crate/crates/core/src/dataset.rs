//! Query datasets: one JSON object per line.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::jsonl;
use crate::types::Query;

pub fn load_dataset(path: &Path) -> Result<Vec<Query>> {
    let records: Vec<(usize, Query)> = jsonl::read_records(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (line, q) in records {
        q.validate().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line,
            message: e.to_string(),
        })?;
        if !seen.insert(q.id.clone()) {
            return Err(Error::DuplicateId(q.id));
        }
        out.push(q);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, queries: &[Query]) -> Result<()> {
    jsonl::write_records(path, queries)?;
    Ok(())
}
