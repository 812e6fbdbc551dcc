//! Stage II: online preference optimization with negative replay.
//!
//! Per query: retrieve the weakest stored attempts, sample a fresh group with
//! those paths discouraged, score everything with the composite reward, pick
//! the best and worst, store the sub-threshold fresh attempts, and take one
//! DPO step against the frozen reference.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AvoidanceMode, RunConfig};
use crate::error::{Error, Result};
use crate::nrm::MemoryBank;
use crate::policy::{Avoidance, Gradient, PolicyParams, PolicySnapshot, SnapshotRole};
use crate::reward::Scorer;
use crate::synthenv::SyntheticEnv;
use crate::types::{Query, RewardBreakdown, Source, Trajectory};

/// Reward spread below which a group carries no preference signal.
pub const NO_CONTRAST: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub query_id: String,
    pub chosen: Trajectory,
    pub rejected: Trajectory,
    pub reward_chosen: f64,
    pub reward_rejected: f64,
    /// Absent for a replayed negative whose stored reward was reused.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown_chosen: Option<RewardBreakdown>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown_rejected: Option<RewardBreakdown>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub trajectory: Trajectory,
    pub reward: f64,
    pub breakdown: Option<RewardBreakdown>,
}

/// Sampling-side view of the memory for one query.
fn avoidance_for(bank: &MemoryBank, query_id: &str, config: &RunConfig) -> (Avoidance, Vec<Trajectory>, Vec<f64>) {
    if config.disable_memory {
        return (Avoidance::None, Vec::new(), Vec::new());
    }
    let retrieved = bank.retrieve_lowest(query_id, config.retrieve_n);
    let paths: BTreeSet<usize> = retrieved.iter().filter_map(|e| e.trajectory.path_id).collect();
    let avoid = if paths.is_empty() {
        Avoidance::None
    } else {
        match config.avoidance {
            AvoidanceMode::Mask => Avoidance::Mask(paths),
            AvoidanceMode::Penalty => Avoidance::Penalty {
                paths,
                delta: config.avoidance_penalty,
            },
        }
    };
    let trajs = retrieved
        .iter()
        .map(|e| Trajectory {
            source: Source::ReplayedNegative,
            ..e.trajectory.clone()
        })
        .collect();
    let rewards = retrieved.iter().map(|e| e.reward).collect();
    (avoid, trajs, rewards)
}

/// Fresh samples followed, when injection is on, by the retrieved negatives
/// tagged as replayed. The second list holds stored rewards for the replayed
/// tail.
pub fn build_candidates<R: Rng + ?Sized>(
    params: &PolicyParams,
    env: &SyntheticEnv,
    bank: &MemoryBank,
    query: &Query,
    config: &RunConfig,
    rng: &mut R,
) -> Result<(Vec<Trajectory>, Vec<f64>)> {
    let (avoid, replayed, stored) = avoidance_for(bank, &query.id, config);
    let mut out = params.sample(env, &query.id, config.group_size, &avoid, rng)?;
    if config.inject_negatives && !config.disable_memory {
        out.extend(replayed);
        Ok((out, stored))
    } else {
        Ok((out, Vec::new()))
    }
}

/// Indices of (chosen, rejected), or `None` when the rewards carry no
/// contrast. Ties go to fresh samples first, then the lower index.
pub fn select_pair(candidates: &[Trajectory], rewards: &[f64]) -> Result<Option<(usize, usize)>> {
    if candidates.len() != rewards.len() {
        return Err(Error::InvalidArgument("candidates and rewards differ in length".into()));
    }
    if candidates.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pair selection needs 2 scored candidates, got {}",
            candidates.len()
        )));
    }
    let rank = |i: usize| (candidates[i].source == Source::ReplayedNegative, i);
    let mut best = 0;
    let mut worst = 0;
    for i in 1..rewards.len() {
        let (r, b, w) = (rewards[i], rewards[best], rewards[worst]);
        if r > b || (r == b && rank(i) < rank(best)) {
            best = i;
        }
        if r < w || (r == w && rank(i) < rank(worst)) {
            worst = i;
        }
    }
    if rewards[best] - rewards[worst] < NO_CONTRAST {
        return Ok(None);
    }
    Ok(Some((best, worst)))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// −log σ(β·(w − l)) for the two log-ratios against the reference.
pub fn dpo_loss_from_log_ratios(chosen_log_ratio: f64, rejected_log_ratio: f64, beta: f64) -> f64 {
    softplus(-beta * (chosen_log_ratio - rejected_log_ratio))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoLoss {
    pub loss: f64,
    /// β times the log-ratio difference.
    pub margin: f64,
    /// Gradient of the loss (descend on it).
    pub gradient: Gradient,
}

pub fn dpo_loss(params: &PolicyParams, reference: &PolicySnapshot, pair: &PreferencePair, beta: f64) -> Result<DpoLoss> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta_dpo must be positive, got {beta}")));
    }
    let pid = |t: &Trajectory| {
        t.path_id
            .ok_or_else(|| Error::Unsupported("DPO updates need synthetic path ids".into()))
    };
    let (w, l) = (pid(&pair.chosen)?, pid(&pair.rejected)?);
    let q = &pair.query_id;
    let lp = params.log_probs(q)?;
    let lr = reference.params().log_probs(q)?;
    for p in [w, l] {
        if p >= lp.len() {
            return Err(Error::UnknownPath {
                query_id: q.clone(),
                path_id: p,
            });
        }
    }
    let margin = beta * ((lp[w] - lr[w]) - (lp[l] - lr[l]));
    let loss = softplus(-margin);
    if !(loss.is_finite() && margin.is_finite()) {
        return Err(Error::NonFinite(format!("dpo loss for query {q:?}")));
    }
    // ∇ log π(w) − ∇ log π(l) = e_w − e_l: the softmax terms cancel.
    let s = -sigmoid(-margin) * beta;
    let mut g = vec![0.0; lp.len()];
    g[w] += s;
    g[l] -= s;
    Ok(DpoLoss {
        loss,
        margin,
        gradient: Gradient::single(q, g),
    })
}

/// Consumer of preference pairs as they are formed.
pub trait PairSink {
    fn write_pair(&mut self, pair: &PreferencePair) -> Result<()>;
}

impl PairSink for Vec<PreferencePair> {
    fn write_pair(&mut self, pair: &PreferencePair) -> Result<()> {
        self.push(pair.clone());
        Ok(())
    }
}

/// One applied DPO update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsoRow {
    pub epoch: usize,
    pub query_id: String,
    pub mean_composite: f64,
    pub mean_outcome: f64,
    pub mean_thinking: f64,
    pub reward_chosen: f64,
    pub reward_rejected: f64,
    pub loss: f64,
    pub margin: f64,
    pub kl_to_ref: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PsoEpochMetrics {
    pub rows: Vec<PsoRow>,
    pub skipped: usize,
    pub scoring_failures: usize,
    /// Fresh samples whose path was in the query's memory when drawn.
    pub reselections: usize,
    pub fresh_samples: usize,
    pub stored: usize,
}

impl PsoEpochMetrics {
    pub fn mean_composite(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.mean_composite))
    }

    pub fn reselection_rate(&self) -> f64 {
        if self.fresh_samples == 0 {
            0.0
        } else {
            self.reselections as f64 / self.fresh_samples as f64
        }
    }

    pub fn merge(&mut self, other: PsoEpochMetrics) {
        self.rows.extend(other.rows);
        self.skipped += other.skipped;
        self.scoring_failures += other.scoring_failures;
        self.reselections += other.reselections;
        self.fresh_samples += other.fresh_samples;
        self.stored += other.stored;
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mutable Stage-II state carried across epochs.
#[derive(Debug, Clone)]
pub struct PsoState {
    pub reference: PolicySnapshot,
    pub bank: MemoryBank,
    pub updates: u64,
    pub epoch: usize,
}

impl PsoState {
    /// Freezes the reference at the current policy; the memory starts empty.
    pub fn new(params: &PolicyParams, config: &RunConfig) -> Self {
        Self {
            reference: params.snapshot(SnapshotRole::Reference),
            bank: MemoryBank::new(config.memory_capacity),
            updates: 0,
            epoch: 0,
        }
    }
}

fn make_pair(query_id: &str, cands: &[Candidate], w: usize, l: usize) -> PreferencePair {
    PreferencePair {
        query_id: query_id.to_string(),
        chosen: cands[w].trajectory.clone(),
        rejected: cands[l].trajectory.clone(),
        reward_chosen: cands[w].reward,
        reward_rejected: cands[l].reward,
        breakdown_chosen: cands[w].breakdown,
        breakdown_rejected: cands[l].breakdown,
    }
}

fn score_all<R: Rng + ?Sized>(
    scorer: &Scorer<'_>,
    query: &Query,
    trajs: Vec<Trajectory>,
    stored: &[f64],
    rescore_replayed: bool,
    failures: &mut usize,
    rng: &mut R,
) -> Vec<Candidate> {
    let fresh = trajs.len() - stored.len();
    let mut out = Vec::with_capacity(trajs.len());
    for (i, t) in trajs.into_iter().enumerate() {
        if i >= fresh && !rescore_replayed {
            out.push(Candidate {
                trajectory: t,
                reward: stored[i - fresh],
                breakdown: None,
            });
            continue;
        }
        match scorer.score(query, &t, rng) {
            Ok(b) => out.push(Candidate {
                trajectory: t,
                reward: b.composite,
                breakdown: Some(b),
            }),
            Err(e) => {
                *failures += 1;
                tracing::warn!(query = %query.id, error = %e, "candidate excluded after scoring failure");
            }
        }
    }
    out
}

/// Applies the DPO step for `pair`; returns (loss, margin) before the step.
fn dpo_update(params: &mut PolicyParams, reference: &PolicySnapshot, pair: &PreferencePair, config: &RunConfig) -> Result<(f64, f64)> {
    let d = dpo_loss(params, reference, pair, config.beta_dpo)?;
    params.apply_gradient(&d.gradient, -config.dpo_learning_rate)?;
    Ok((d.loss, d.margin))
}

fn after_update(state: &mut PsoState, params: &PolicyParams, config: &RunConfig) {
    state.updates += 1;
    if config.ref_refresh_every > 0 && state.updates.is_multiple_of(config.ref_refresh_every as u64) {
        state.reference = params.snapshot(SnapshotRole::Reference);
    }
}

/// One online epoch over `queries`.
#[allow(clippy::too_many_arguments)]
pub fn pso_epoch<R: Rng + ?Sized>(
    params: &mut PolicyParams,
    state: &mut PsoState,
    env: &SyntheticEnv,
    queries: &[Query],
    config: &RunConfig,
    scorer: &Scorer<'_>,
    rng: &mut R,
    mut sink: Option<&mut (dyn PairSink + '_)>,
) -> Result<PsoEpochMetrics> {
    state.epoch += 1;
    let mut m = PsoEpochMetrics::default();
    for query in queries {
        pso_query_step(params, state, env, query, config, scorer, rng, sink.as_deref_mut(), &mut m)?;
    }
    tracing::debug!(epoch = state.epoch, rows = m.rows.len(), skipped = m.skipped, "pso epoch");
    Ok(m)
}

/// One Stage-II visit of a single query. Returns whether an update was applied;
/// counters and the row (if any) are added to `m`.
#[allow(clippy::too_many_arguments)]
pub fn pso_query_step<R: Rng + ?Sized>(
    params: &mut PolicyParams,
    state: &mut PsoState,
    env: &SyntheticEnv,
    query: &Query,
    config: &RunConfig,
    scorer: &Scorer<'_>,
    rng: &mut R,
    sink: Option<&mut (dyn PairSink + '_)>,
    m: &mut PsoEpochMetrics,
) -> Result<bool> {
    let (trajs, stored) = build_candidates(params, env, &state.bank, query, config, rng)?;
    let fresh = trajs.len() - stored.len();

    let in_memory: BTreeSet<usize> = state
        .bank
        .entries(&query.id)
        .filter_map(|e| e.trajectory.path_id)
        .collect();
    m.fresh_samples += fresh;
    m.reselections += trajs[..fresh]
        .iter()
        .filter(|t| t.path_id.is_some_and(|p| in_memory.contains(&p)))
        .count();

    let cands = score_all(scorer, query, trajs, &stored, config.rescore_replayed, &mut m.scoring_failures, rng);
    let fresh_scored: Vec<&Candidate> = cands.iter().filter(|c| c.trajectory.source == Source::FreshSample).collect();

    // feed the memory with this round's weak fresh attempts
    if config.lowest_only {
        let lowest = fresh_scored
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.reward.total_cmp(&b.1.reward).then(a.0.cmp(&b.0)));
        if let Some((_, c)) = lowest {
            m.stored += state.bank.maybe_store(&query.id, c.trajectory.clone(), c.reward, config.tau) as usize;
        }
    } else {
        for c in &fresh_scored {
            m.stored += state.bank.maybe_store(&query.id, c.trajectory.clone(), c.reward, config.tau) as usize;
        }
    }

    if cands.len() < 2 {
        tracing::warn!(query = %query.id, scored = cands.len(), "too few scored candidates; step skipped");
        m.skipped += 1;
        return Ok(false);
    }
    let ts: Vec<Trajectory> = cands.iter().map(|c| c.trajectory.clone()).collect();
    let rs: Vec<f64> = cands.iter().map(|c| c.reward).collect();
    let Some((w, l)) = select_pair(&ts, &rs)? else {
        m.skipped += 1;
        return Ok(false);
    };
    let pair = make_pair(&query.id, &cands, w, l);
    if let Some(s) = sink {
        s.write_pair(&pair)?;
    }
    let (loss, margin) = dpo_update(params, &state.reference, &pair, config)?;
    after_update(state, params, config);

    let scored = || fresh_scored.iter().filter_map(|c| c.breakdown);
    m.rows.push(PsoRow {
        epoch: state.epoch,
        query_id: query.id.clone(),
        mean_composite: mean(scored().map(|b| b.composite)),
        mean_outcome: mean(scored().map(|b| b.outcome_reward)),
        mean_thinking: mean(scored().map(|b| b.thinking_reward)),
        reward_chosen: pair.reward_chosen,
        reward_rejected: pair.reward_rejected,
        loss,
        margin,
        kl_to_ref: params.kl_to(&state.reference, &query.id)?,
    });
    Ok(true)
}

/// Pairs drawn once from the given policy, one per query with contrast.
pub fn offline_pairs<R: Rng + ?Sized>(
    params: &PolicyParams,
    env: &SyntheticEnv,
    queries: &[Query],
    config: &RunConfig,
    scorer: &Scorer<'_>,
    rng: &mut R,
) -> Result<(Vec<PreferencePair>, PsoEpochMetrics)> {
    let mut m = PsoEpochMetrics::default();
    let mut pairs = Vec::new();
    for query in queries {
        let trajs = params.sample(env, &query.id, config.group_size, &Avoidance::None, rng)?;
        m.fresh_samples += trajs.len();
        let cands = score_all(scorer, query, trajs, &[], true, &mut m.scoring_failures, rng);
        if cands.len() < 2 {
            m.skipped += 1;
            continue;
        }
        let ts: Vec<Trajectory> = cands.iter().map(|c| c.trajectory.clone()).collect();
        let rs: Vec<f64> = cands.iter().map(|c| c.reward).collect();
        match select_pair(&ts, &rs)? {
            Some((w, l)) => pairs.push(make_pair(&query.id, &cands, w, l)),
            None => m.skipped += 1,
        }
    }
    Ok((pairs, m))
}

/// One epoch of DPO over a fixed pair set.
pub fn offline_epoch(
    params: &mut PolicyParams,
    state: &mut PsoState,
    pairs: &[PreferencePair],
    config: &RunConfig,
) -> Result<PsoEpochMetrics> {
    state.epoch += 1;
    let mut m = PsoEpochMetrics::default();
    for pair in pairs {
        offline_update(params, state, pair, config, &mut m)?;
    }
    Ok(m)
}

/// One DPO step on a stored pair; the row goes to `m`.
pub fn offline_update(
    params: &mut PolicyParams,
    state: &mut PsoState,
    pair: &PreferencePair,
    config: &RunConfig,
    m: &mut PsoEpochMetrics,
) -> Result<()> {
    let (loss, margin) = dpo_update(params, &state.reference, pair, config)?;
    after_update(state, params, config);
    let bd = [pair.breakdown_chosen, pair.breakdown_rejected];
    let field = |f: fn(&RewardBreakdown) -> f64| mean(bd.iter().flatten().map(f));
    m.rows.push(PsoRow {
        epoch: state.epoch,
        query_id: pair.query_id.clone(),
        mean_composite: field(|b| b.composite),
        mean_outcome: field(|b| b.outcome_reward),
        mean_thinking: field(|b| b.thinking_reward),
        reward_chosen: pair.reward_chosen,
        reward_rejected: pair.reward_rejected,
        loss,
        margin,
        kl_to_ref: params.kl_to(&state.reference, &pair.query_id)?,
    });
    Ok(())
}
