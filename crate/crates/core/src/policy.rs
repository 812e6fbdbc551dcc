//! Tabular softmax policy over each query's path space.
//!
//! Log-probabilities, score-function gradients and KL divergences are exact;
//! nothing here is estimated. Updates are plain gradient ascent.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::synthenv::SyntheticEnv;
use crate::types::Trajectory;

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|x| x - lse).collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    log_softmax(xs).into_iter().map(f64::exp).collect()
}

/// Sparse gradient: one dense vector per touched query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    entries: BTreeMap<String, Vec<f64>>,
}

impl Gradient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(query_id: &str, values: Vec<f64>) -> Self {
        let mut g = Self::new();
        g.entries.insert(query_id.to_string(), values);
        g
    }

    pub fn get(&self, query_id: &str) -> Option<&[f64]> {
        self.entries.get(query_id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.entries.iter()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (q, v) in &other.entries {
            let slot = self
                .entries
                .entry(q.clone())
                .or_insert_with(|| vec![0.0; v.len()]);
            for (a, b) in slot.iter_mut().zip(v) {
                *a += scale * b;
            }
        }
    }

    pub fn scaled(&self, scale: f64) -> Gradient {
        let mut g = Gradient::new();
        g.add_scaled(self, scale);
        g
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().flatten().all(|x| x.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries.values().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Retrieved negatives acting on sampling.
#[derive(Debug, Clone, PartialEq)]
pub enum Avoidance {
    None,
    /// Draw from the softmax renormalized over the remaining paths.
    Mask(BTreeSet<usize>),
    /// Lower the listed logits by `delta` for the draw only.
    Penalty { paths: BTreeSet<usize>, delta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotRole {
    Reference,
    Behavior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    logits: BTreeMap<String, Vec<f64>>,
    version: u64,
}

/// Frozen copy of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    params: PolicyParams,
    role: SnapshotRole,
}

impl PolicySnapshot {
    pub fn role(&self) -> SnapshotRole {
        self.role
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    query_id: String,
    path_id: usize,
    logit: f64,
}

impl PolicyParams {
    pub fn new(logits: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        for (q, row) in &logits {
            if row.is_empty() {
                return Err(Error::InvalidArgument(format!("query {q:?} has no paths")));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("logits of query {q:?}")));
            }
        }
        Ok(Self { logits, version: 0 })
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &String> {
        self.logits.keys()
    }

    pub fn logits(&self, query_id: &str) -> Result<&[f64]> {
        self.logits
            .get(query_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownQuery(query_id.to_string()))
    }

    /// Overwrites one query's logits, bumping the version.
    pub fn set_logits(&mut self, query_id: &str, values: Vec<f64>) -> Result<()> {
        let row = self
            .logits
            .get_mut(query_id)
            .ok_or_else(|| Error::UnknownQuery(query_id.to_string()))?;
        if values.len() != row.len() {
            return Err(Error::InvalidArgument(format!(
                "query {query_id:?} has {} paths, got {} logits",
                row.len(),
                values.len()
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("logits of query {query_id:?}")));
        }
        *row = values;
        self.version += 1;
        Ok(())
    }

    pub fn probs(&self, query_id: &str) -> Result<Vec<f64>> {
        Ok(softmax(self.logits(query_id)?))
    }

    pub fn log_probs(&self, query_id: &str) -> Result<Vec<f64>> {
        Ok(log_softmax(self.logits(query_id)?))
    }

    fn check_path(&self, query_id: &str, path_id: usize) -> Result<&[f64]> {
        let row = self.logits(query_id)?;
        if path_id >= row.len() {
            return Err(Error::UnknownPath {
                query_id: query_id.to_string(),
                path_id,
            });
        }
        Ok(row)
    }

    pub fn log_prob(&self, query_id: &str, path_id: usize) -> Result<f64> {
        let row = self.check_path(query_id, path_id)?;
        Ok(row[path_id] - logsumexp(row))
    }

    /// ∇θ log π(path): one-hot(path) − softmax(θ) over the query's logits.
    pub fn grad_log_prob(&self, query_id: &str, path_id: usize) -> Result<Gradient> {
        let row = self.check_path(query_id, path_id)?;
        let mut g: Vec<f64> = softmax(row).into_iter().map(|p| -p).collect();
        g[path_id] += 1.0;
        Ok(Gradient::single(query_id, g))
    }

    /// Exact KL(π_θ ‖ π_snapshot) for one query.
    pub fn kl_to(&self, snapshot: &PolicySnapshot, query_id: &str) -> Result<f64> {
        let (lp, lr) = self.paired_log_probs(snapshot, query_id)?;
        let kl: f64 = lp.iter().zip(&lr).map(|(a, b)| a.exp() * (a - b)).sum();
        Ok(kl.max(0.0))
    }

    /// ∂KL/∂θ_j = π_j (log π_j − log ρ_j − KL).
    pub fn kl_grad(&self, snapshot: &PolicySnapshot, query_id: &str) -> Result<Gradient> {
        let (lp, lr) = self.paired_log_probs(snapshot, query_id)?;
        let kl: f64 = lp.iter().zip(&lr).map(|(a, b)| a.exp() * (a - b)).sum();
        let g = lp
            .iter()
            .zip(&lr)
            .map(|(a, b)| a.exp() * (a - b - kl))
            .collect();
        Ok(Gradient::single(query_id, g))
    }

    fn paired_log_probs(&self, snapshot: &PolicySnapshot, query_id: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        let lp = self.log_probs(query_id)?;
        let lr = snapshot.params.log_probs(query_id)?;
        if lp.len() != lr.len() {
            return Err(Error::InvalidArgument(format!(
                "snapshot path count differs for query {query_id:?}"
            )));
        }
        Ok((lp, lr))
    }

    /// Draws `count` path ids. Returned log-probabilities are always those of
    /// the unrestricted policy, whatever the avoidance.
    pub fn sample_paths<R: Rng + ?Sized>(
        &self,
        query_id: &str,
        count: usize,
        avoid: &Avoidance,
        rng: &mut R,
    ) -> Result<Vec<(usize, f64)>> {
        if count == 0 {
            return Err(Error::InvalidArgument("sample count must be positive".into()));
        }
        let row = self.logits(query_id)?;
        let n = row.len();
        let check = |set: &BTreeSet<usize>| -> Result<()> {
            if let Some(&bad) = set.iter().find(|&&p| p >= n) {
                return Err(Error::UnknownPath {
                    query_id: query_id.to_string(),
                    path_id: bad,
                });
            }
            Ok(())
        };
        let mut sampling = row.to_vec();
        match avoid {
            Avoidance::None => {}
            Avoidance::Mask(set) => {
                check(set)?;
                if set.len() >= n {
                    return Err(Error::InvalidArgument(
                        "avoidance mask covers every path".into(),
                    ));
                }
                for &p in set {
                    sampling[p] = f64::NEG_INFINITY;
                }
            }
            Avoidance::Penalty { paths, delta } => {
                check(paths)?;
                for &p in paths {
                    sampling[p] -= delta;
                }
            }
        }
        let weights = softmax(&sampling);
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::InvalidArgument(format!("sampling weights: {e}")))?;
        let lp = log_softmax(row);
        Ok((0..count)
            .map(|_| {
                let p = dist.sample(rng);
                (p, lp[p])
            })
            .collect())
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        env: &SyntheticEnv,
        query_id: &str,
        count: usize,
        avoid: &Avoidance,
        rng: &mut R,
    ) -> Result<Vec<Trajectory>> {
        self.sample_paths(query_id, count, avoid, rng)?
            .into_iter()
            .map(|(p, lp)| env.trajectory(query_id, p, lp))
            .collect()
    }

    pub fn snapshot(&self, role: SnapshotRole) -> PolicySnapshot {
        PolicySnapshot {
            params: self.clone(),
            role,
        }
    }

    /// θ ← θ + lr·g. Returns the new version.
    pub fn apply_gradient(&mut self, gradient: &Gradient, learning_rate: f64) -> Result<u64> {
        if !gradient.is_finite() {
            return Err(Error::NonFinite("gradient component".into()));
        }
        if !learning_rate.is_finite() {
            return Err(Error::NonFinite("learning rate".into()));
        }
        for (q, g) in gradient.iter() {
            let row = self
                .logits
                .get(q)
                .ok_or_else(|| Error::UnknownQuery(q.clone()))?;
            if row.len() != g.len() {
                return Err(Error::InvalidArgument(format!("gradient shape mismatch for {q:?}")));
            }
        }
        for (q, g) in gradient.iter() {
            let row = self.logits.get_mut(q).expect("checked above");
            for (x, d) in row.iter_mut().zip(g) {
                *x += learning_rate * d;
            }
        }
        if self.logits.values().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("logits after update".into()));
        }
        self.version += 1;
        Ok(self.version)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        jsonl::write_line(&mut w, &CheckpointHeader { version: self.version }).map_err(io)?;
        for (q, row) in &self.logits {
            for (p, &logit) in row.iter().enumerate() {
                let entry = CheckpointEntry {
                    query_id: q.clone(),
                    path_id: p,
                    logit,
                };
                jsonl::write_line(&mut w, &entry).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.display().to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty checkpoint".into()))?;
        let header: CheckpointHeader =
            serde_json::from_str(head).map_err(|e| parse_err(1, e.to_string()))?;
        let mut logits: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (idx, line) in lines {
            let e: CheckpointEntry =
                serde_json::from_str(line).map_err(|err| parse_err(idx + 1, err.to_string()))?;
            let row = logits.entry(e.query_id).or_default();
            if e.path_id != row.len() {
                return Err(parse_err(idx + 1, format!("expected path_id {}, got {}", row.len(), e.path_id)));
            }
            row.push(e.logit);
        }
        let mut params = PolicyParams::new(logits)?;
        params.version = header.version;
        Ok(params)
    }
}
