//! Remote generation and the Stage-II data-generation loop.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::chat::ChatClient;
use super::judge::RemoteJudge;
use super::prompts::generation_prompt;
use crate::config::RunConfig;
use crate::dpo::{select_pair, PairSink, PreferencePair};
use crate::error::{Error, Result};
use crate::nrm::MemoryBank;
use crate::reward::{format_reward, outcome_reward, parse_completion, ThinkingJudge};
use crate::types::{Query, RewardBreakdown, Source, Trajectory};

/// Requests `group_size` completions for the (possibly memory-augmented)
/// prompt. Unparseable completions are kept; they simply score format 0.
pub fn generate(client: &ChatClient, query: &Query, negatives: &[Trajectory], group_size: usize) -> Result<Vec<Trajectory>> {
    let req = client.request(&generation_prompt(query, negatives), group_size);
    let resp = client.complete(&req)?;
    Ok(resp
        .texts
        .into_iter()
        .map(|text| {
            let parsed = parse_completion(&text);
            Trajectory {
                query_id: query.id.clone(),
                path_id: None,
                think_text: parsed.think,
                answer_text: parsed.answer,
                logprob_behavior: None,
                source: Source::FreshSample,
                raw_output: Some(text),
            }
        })
        .collect())
}

/// Applies `f` to every item with at most `limit` calls in flight; results
/// keep input order.
pub fn map_bounded<T, U, F>(items: &[T], limit: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    let slots: Vec<Mutex<Option<U>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = limit.max(1).min(items.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteRow {
    pub epoch: usize,
    pub query_id: String,
    pub mean_composite: f64,
    pub mean_outcome: f64,
    pub mean_thinking: f64,
    pub reward_chosen: Option<f64>,
    pub reward_rejected: Option<f64>,
    pub skipped: bool,
    pub scoring_failures: usize,
    pub stored: usize,
}

fn score_remote(judge: &RemoteJudge, query: &Query, t: &Trajectory, lambda: f64, with_thinking: bool) -> Result<RewardBreakdown> {
    let format = format_reward(t, None)?;
    let outcome = outcome_reward(t, query);
    let thinking = if with_thinking { judge.score(query, t)?.clamp(0.0, 1.0) } else { 0.0 };
    RewardBreakdown::new(format, outcome, thinking, lambda)
}

/// Stage-II sampling, scoring and memory over `config.epochs` passes,
/// without parameter updates. Pairs go to `sink`.
pub fn run_remote_stage2(
    generator: &ChatClient,
    judge: &RemoteJudge,
    queries: &[Query],
    config: &RunConfig,
    max_concurrency: usize,
    bank: &mut MemoryBank,
    mut sink: Option<&mut (dyn PairSink + '_)>,
) -> Result<Vec<RemoteRow>> {
    let lambda = config.effective_lambda();
    let with_thinking = !config.disable_thinking_reward;
    let mut rows = Vec::new();
    for epoch in 1..=config.epochs {
        for query in queries {
            let retrieved: Vec<(Trajectory, f64)> = if config.disable_memory {
                Vec::new()
            } else {
                bank.retrieve_lowest(&query.id, config.retrieve_n)
                    .into_iter()
                    .map(|e| {
                        let t = Trajectory {
                            source: Source::ReplayedNegative,
                            ..e.trajectory.clone()
                        };
                        (t, e.reward)
                    })
                    .collect()
            };
            let negatives: Vec<Trajectory> = retrieved.iter().map(|(t, _)| t.clone()).collect();
            let fresh = generate(generator, query, &negatives, config.group_size)?;

            let scored = map_bounded(&fresh, max_concurrency, |t| score_remote(judge, query, t, lambda, with_thinking));
            let mut failures = 0;
            let mut cands: Vec<(Trajectory, f64, Option<RewardBreakdown>)> = Vec::new();
            for (t, s) in fresh.into_iter().zip(scored) {
                match s {
                    Ok(b) => cands.push((t, b.composite, Some(b))),
                    Err(e) => {
                        failures += 1;
                        tracing::warn!(query = %query.id, error = %e, "candidate excluded after scoring failure");
                    }
                }
            }
            let breakdowns: Vec<RewardBreakdown> = cands.iter().filter_map(|c| c.2).collect();
            let mean = |f: fn(&RewardBreakdown) -> f64| {
                if breakdowns.is_empty() {
                    0.0
                } else {
                    breakdowns.iter().map(f).sum::<f64>() / breakdowns.len() as f64
                }
            };
            let mut stored = 0;
            for (t, r, _) in &cands {
                stored += bank.maybe_store(&query.id, t.clone(), *r, config.tau) as usize;
            }
            if config.inject_negatives {
                for (t, r) in retrieved {
                    cands.push((t, r, None));
                }
            }
            let mut row = RemoteRow {
                epoch,
                query_id: query.id.clone(),
                mean_composite: mean(|b| b.composite),
                mean_outcome: mean(|b| b.outcome_reward),
                mean_thinking: mean(|b| b.thinking_reward),
                reward_chosen: None,
                reward_rejected: None,
                skipped: true,
                scoring_failures: failures,
                stored,
            };
            if cands.len() >= 2 {
                let ts: Vec<Trajectory> = cands.iter().map(|c| c.0.clone()).collect();
                let rs: Vec<f64> = cands.iter().map(|c| c.1).collect();
                if let Some((w, l)) = select_pair(&ts, &rs)? {
                    let pair = PreferencePair {
                        query_id: query.id.clone(),
                        chosen: cands[w].0.clone(),
                        rejected: cands[l].0.clone(),
                        reward_chosen: cands[w].1,
                        reward_rejected: cands[l].1,
                        breakdown_chosen: cands[w].2,
                        breakdown_rejected: cands[l].2,
                    };
                    if let Some(s) = sink.as_deref_mut() {
                        s.write_pair(&pair)?;
                    }
                    row.reward_chosen = Some(pair.reward_chosen);
                    row.reward_rejected = Some(pair.reward_rejected);
                    row.skipped = false;
                }
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Unbiased pass@k per query from `samples` remote completions each.
pub fn remote_pass_at_k(client: &ChatClient, queries: &[Query], ks: &[usize], samples: usize) -> Result<Vec<(String, Vec<f64>)>> {
    queries
        .iter()
        .map(|q| {
            let outs = generate(client, q, &[], samples)?;
            if outs.len() < ks.iter().copied().max().unwrap_or(1) {
                return Err(Error::MalformedResponse(format!(
                    "endpoint returned {} completions, fewer than the largest k",
                    outs.len()
                )));
            }
            let c = outs.iter().filter(|t| outcome_reward(t, q) == 1.0).count();
            let row = ks
                .iter()
                .map(|&k| crate::evalkit::pass_at_k_unbiased(outs.len(), c, k))
                .collect::<Result<Vec<_>>>()?;
            Ok((q.id.clone(), row))
        })
        .collect()
}
