//! Negative replay memory: a per-query FIFO of low-reward trajectories.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::types::{Source, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub trajectory: Trajectory,
    pub reward: f64,
    pub inserted_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    next_inserted_at: u64,
    entries: BTreeMap<String, VecDeque<MemoryEntry>>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            next_inserted_at: 0,
            entries: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self, query_id: &str) -> usize {
        self.entries.get(query_id).map_or(0, VecDeque::len)
    }

    pub fn total_len(&self) -> usize {
        self.entries.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    /// Entries for one query, oldest first.
    pub fn entries(&self, query_id: &str) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.get(query_id).into_iter().flatten()
    }

    /// Stores the trajectory iff `reward < tau`, evicting the oldest entry
    /// when the query's list is full.
    pub fn maybe_store(&mut self, query_id: &str, trajectory: Trajectory, reward: f64, tau: f64) -> bool {
        debug_assert!((0.0..=1.0).contains(&reward), "reward {reward} outside [0, 1]");
        debug_assert_eq!(trajectory.query_id, query_id);
        if reward.is_nan() || reward >= tau || self.capacity == 0 {
            return false;
        }
        let list = self.entries.entry(query_id.to_string()).or_default();
        while list.len() >= self.capacity {
            list.pop_front();
        }
        list.push_back(MemoryEntry {
            trajectory,
            reward,
            inserted_at: self.next_inserted_at,
        });
        self.next_inserted_at += 1;
        true
    }

    /// Up to `n` entries ascending by reward; equal rewards come oldest first.
    pub fn retrieve_lowest(&self, query_id: &str, n: usize) -> Vec<&MemoryEntry> {
        let mut all: Vec<&MemoryEntry> = self.entries(query_id).collect();
        all.sort_by(|a, b| a.reward.total_cmp(&b.reward).then(a.inserted_at.cmp(&b.inserted_at)));
        all.truncate(n);
        all
    }

    pub fn persist(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = Header {
            capacity: self.capacity,
            next_inserted_at: self.next_inserted_at,
        };
        jsonl::write_line(&mut w, &header).map_err(|e| Error::io(path, e))?;
        for (qid, list) in &self.entries {
            for e in list {
                let rec = EntryRecord {
                    query_id: qid.clone(),
                    inserted_at: e.inserted_at,
                    reward: e.reward,
                    think_text: e.trajectory.think_text.clone(),
                    answer_text: e.trajectory.answer_text.clone(),
                    path_id: e.trajectory.path_id,
                    logprob_behavior: e.trajectory.logprob_behavior,
                    source: e.trajectory.source,
                    raw_output: e.trajectory.raw_output.clone(),
                };
                jsonl::write_line(&mut w, &rec).map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn restore(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.display().to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hline, htext) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing memory header".into()))?;
        let header: Header = serde_json::from_str(htext).map_err(|e| parse_err(hline + 1, e.to_string()))?;
        let mut bank = MemoryBank::new(header.capacity);
        bank.next_inserted_at = header.next_inserted_at;
        for (idx, l) in lines {
            let rec: EntryRecord = serde_json::from_str(l).map_err(|e| parse_err(idx + 1, e.to_string()))?;
            if rec.inserted_at >= bank.next_inserted_at {
                return Err(parse_err(idx + 1, "inserted_at beyond header counter".into()));
            }
            let list = bank.entries.entry(rec.query_id.clone()).or_default();
            if list.back().is_some_and(|b| b.inserted_at >= rec.inserted_at) {
                return Err(parse_err(idx + 1, "entries out of insertion order".into()));
            }
            if list.len() >= bank.capacity {
                return Err(parse_err(idx + 1, "more entries than capacity".into()));
            }
            list.push_back(MemoryEntry {
                trajectory: Trajectory {
                    query_id: rec.query_id,
                    path_id: rec.path_id,
                    think_text: rec.think_text,
                    answer_text: rec.answer_text,
                    logprob_behavior: rec.logprob_behavior,
                    source: rec.source,
                    raw_output: rec.raw_output,
                },
                reward: rec.reward,
                inserted_at: rec.inserted_at,
            });
        }
        Ok(bank)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    capacity: usize,
    next_inserted_at: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryRecord {
    query_id: String,
    inserted_at: u64,
    reward: f64,
    think_text: String,
    answer_text: String,
    #[serde(default)]
    path_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logprob_behavior: Option<f64>,
    #[serde(default = "fresh")]
    source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw_output: Option<String>,
}

fn fresh() -> Source {
    Source::FreshSample
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(pid: usize) -> Trajectory {
        Trajectory {
            query_id: "q".into(),
            path_id: Some(pid),
            think_text: format!("think {pid}"),
            answer_text: format!("{pid}"),
            logprob_behavior: Some(-1.5),
            source: Source::FreshSample,
            raw_output: None,
        }
    }

    fn rewards(bank: &MemoryBank, q: &str) -> Vec<f64> {
        bank.entries(q).map(|e| e.reward).collect()
    }

    #[test]
    fn threshold_is_strict() {
        let mut b = MemoryBank::new(4);
        assert!(b.maybe_store("q", t(0), 0.4, 0.5));
        assert!(!b.maybe_store("q", t(1), 0.5, 0.5));
        assert_eq!(b.len("q"), 1);
    }

    #[test]
    fn fifo_eviction() {
        let mut b = MemoryBank::new(3);
        for (i, r) in [0.1, 0.2, 0.3, 0.05].into_iter().enumerate() {
            assert!(b.maybe_store("q", t(i), r, 0.5));
        }
        assert_eq!(rewards(&b, "q"), [0.2, 0.3, 0.05]);
    }

    #[test]
    fn retrieval_order() {
        let mut b = MemoryBank::new(4);
        for (i, r) in [0.4, 0.1, 0.3].into_iter().enumerate() {
            b.maybe_store("q", t(i), r, 0.5);
        }
        let got: Vec<f64> = b.retrieve_lowest("q", 2).iter().map(|e| e.reward).collect();
        assert_eq!(got, [0.1, 0.3]);
        assert!(b.retrieve_lowest("other", 2).is_empty());
    }

    #[test]
    fn retrieval_tie_prefers_older() {
        let mut b = MemoryBank::new(4);
        b.maybe_store("q", t(0), 0.2, 0.5);
        b.maybe_store("q", t(1), 0.2, 0.5);
        let got = b.retrieve_lowest("q", 1);
        assert_eq!(got[0].trajectory.path_id, Some(0));
    }

    #[test]
    fn queries_are_independent() {
        let mut b = MemoryBank::new(1);
        let (mut x, mut y) = (t(0), t(1));
        x.query_id = "a".into();
        y.query_id = "b".into();
        b.maybe_store("a", x, 0.1, 0.5);
        b.maybe_store("b", y, 0.1, 0.5);
        assert_eq!((b.len("a"), b.len("b")), (1, 1));
    }

    #[test]
    fn persist_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mem.jsonl");
        let mut b = MemoryBank::new(3);
        b.maybe_store("q", t(0), 0.1, 0.5);
        b.maybe_store("q", t(1), 0.3, 0.5);
        let mut other = t(2);
        other.query_id = "r".into();
        b.maybe_store("r", other, 0.2, 0.5);
        b.persist(&p).unwrap();
        assert_eq!(MemoryBank::restore(&p).unwrap(), b);

        let empty = MemoryBank::new(2);
        empty.persist(&p).unwrap();
        let back = MemoryBank::restore(&p).unwrap();
        assert!(back.is_empty());
        assert_eq!(back, empty);
    }

    #[test]
    fn truncated_file_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mem.jsonl");
        let mut b = MemoryBank::new(3);
        for i in 0..3 {
            b.maybe_store("q", t(i), 0.1, 0.5);
        }
        b.persist(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, &text[..text.len() - 20]).unwrap();
        match MemoryBank::restore(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[derive(Debug, Clone)]
    enum Op {
        Store(u8, f64),
        Get(u8, usize),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u8..3, 0.0f64..=1.0).prop_map(|(q, r)| Op::Store(q, r)),
            (0u8..3, 0usize..6).prop_map(|(q, n)| Op::Get(q, n)),
        ]
    }

    proptest! {
        // Compared against a naive list-of-everything model.
        #[test]
        fn matches_naive_model(cap in 1usize..5, tau in 0.0f64..=1.0, ops in proptest::collection::vec(op(), 0..60)) {
            let mut bank = MemoryBank::new(cap);
            let mut naive: Vec<(u8, f64, u64)> = Vec::new();
            let mut clock = 0u64;
            for (i, o) in ops.into_iter().enumerate() {
                match o {
                    Op::Store(q, r) => {
                        let mut tr = t(i);
                        tr.query_id = q.to_string();
                        let stored = bank.maybe_store(&q.to_string(), tr, r, tau);
                        prop_assert_eq!(stored, r < tau);
                        if stored {
                            naive.push((q, r, clock));
                            clock += 1;
                            let mine: Vec<usize> = naive.iter().enumerate().filter(|(_, e)| e.0 == q).map(|(j, _)| j).collect();
                            if mine.len() > cap {
                                naive.remove(mine[0]);
                            }
                        }
                    }
                    Op::Get(q, n) => {
                        let before = bank.clone();
                        let got: Vec<(f64, u64)> = bank.retrieve_lowest(&q.to_string(), n).iter().map(|e| (e.reward, e.inserted_at)).collect();
                        let mut want: Vec<(f64, u64)> = naive.iter().filter(|e| e.0 == q).map(|e| (e.1, e.2)).collect();
                        want.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                        want.truncate(n);
                        prop_assert_eq!(got, want);
                        prop_assert_eq!(&bank, &before);
                    }
                }
                for q in 0u8..3 {
                    let key = q.to_string();
                    prop_assert!(bank.len(&key) <= cap);
                    prop_assert!(bank.entries(&key).all(|e| e.reward < tau));
                }
            }
        }

        #[test]
        fn old_entries_flushed_after_capacity_inserts(cap in 1usize..6, pre in 0usize..10) {
            let mut bank = MemoryBank::new(cap);
            for i in 0..pre {
                bank.maybe_store("q", t(i), 0.1, 0.5);
            }
            let mark = bank.next_inserted_at;
            for i in 0..cap {
                bank.maybe_store("q", t(100 + i), 0.2, 0.5);
            }
            prop_assert!(bank.entries("q").all(|e| e.inserted_at >= mark));
        }
    }
}
