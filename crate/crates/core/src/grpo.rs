//! Stage I: group-relative policy optimization on format + answer rewards.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::policy::{Avoidance, Gradient, PolicyParams, PolicySnapshot, SnapshotRole};
use crate::reward::{format_reward, outcome_reward, stage1_reward};
use crate::synthenv::{label_of, SyntheticEnv};
use crate::types::{Query, Trajectory};

pub const ADVANTAGE_EPS: f64 = 1e-8;

/// (R − mean) / (std + ε) with the population std; an all-equal group gets
/// all-zero advantages.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "advantages need a group of at least 2, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("group reward".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / (std + ADVANTAGE_EPS)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub query_id: String,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl GroupBatch {
    pub fn new(query_id: &str, trajectories: Vec<Trajectory>, rewards: Vec<f64>) -> Result<Self> {
        if trajectories.len() != rewards.len() {
            return Err(Error::InvalidArgument("trajectories and rewards differ in length".into()));
        }
        let advantages = compute_advantages(&rewards)?;
        Ok(Self {
            query_id: query_id.to_string(),
            trajectories,
            rewards,
            advantages,
        })
    }

    fn path_ids(&self) -> Result<Vec<usize>> {
        self.trajectories
            .iter()
            .map(|t| {
                t.path_id
                    .ok_or_else(|| Error::Unsupported("policy updates need synthetic path ids".into()))
            })
            .collect()
    }
}

fn ratio_terms(
    params: &PolicyParams,
    old: &PolicySnapshot,
    batch: &GroupBatch,
    clip: Option<f64>,
) -> Result<Vec<(usize, f64, f64, bool)>> {
    let lp = params.log_probs(&batch.query_id)?;
    let lo = old.params().log_probs(&batch.query_id)?;
    let pids = batch.path_ids()?;
    Ok(pids
        .into_iter()
        .zip(&batch.advantages)
        .map(|(p, &a)| {
            let r = (lp[p] - lo[p]).exp();
            // the min(rA, clip(r)A) form: gradient vanishes where the clipped term binds
            let (term, active) = match clip {
                Some(eps) => {
                    let clipped = r.clamp(1.0 - eps, 1.0 + eps) * a;
                    let raw = r * a;
                    if clipped < raw {
                        (clipped, false)
                    } else {
                        (raw, true)
                    }
                }
                None => (r * a, true),
            };
            (p, r, term, active)
        })
        .collect())
}

/// (1/G) Σ ratio_i · A_i, optionally in clipped form.
pub fn surrogate_objective(
    params: &PolicyParams,
    old: &PolicySnapshot,
    batch: &GroupBatch,
    clip: Option<f64>,
) -> Result<f64> {
    let terms = ratio_terms(params, old, batch, clip)?;
    Ok(terms.iter().map(|t| t.2).sum::<f64>() / terms.len() as f64)
}

pub fn surrogate_gradient(
    params: &PolicyParams,
    old: &PolicySnapshot,
    batch: &GroupBatch,
    clip: Option<f64>,
) -> Result<Gradient> {
    let terms = ratio_terms(params, old, batch, clip)?;
    let probs = params.probs(&batch.query_id)?;
    let g = terms.len() as f64;
    let mut out = vec![0.0; probs.len()];
    for ((p, r, _, active), a) in terms.into_iter().zip(&batch.advantages) {
        if !active || *a == 0.0 {
            continue;
        }
        let w = r * a / g;
        for (j, pj) in probs.iter().enumerate() {
            out[j] -= w * pj;
        }
        out[p] += w;
    }
    Ok(Gradient::single(&batch.query_id, out))
}

/// Surrogate minus β_kl · KL(π_θ ‖ π_ref).
pub fn grpo_objective(
    params: &PolicyParams,
    old: &PolicySnapshot,
    reference: &PolicySnapshot,
    batch: &GroupBatch,
    beta_kl: f64,
    clip: Option<f64>,
) -> Result<f64> {
    Ok(surrogate_objective(params, old, batch, clip)? - beta_kl * params.kl_to(reference, &batch.query_id)?)
}

pub fn grpo_gradient(
    params: &PolicyParams,
    old: &PolicySnapshot,
    reference: &PolicySnapshot,
    batch: &GroupBatch,
    beta_kl: f64,
    clip: Option<f64>,
) -> Result<Gradient> {
    let mut g = surrogate_gradient(params, old, batch, clip)?;
    if beta_kl != 0.0 {
        g.add_scaled(&params.kl_grad(reference, &batch.query_id)?, -beta_kl);
    }
    Ok(g)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoStepMetrics {
    pub mean_reward: f64,
    pub mean_format: f64,
    pub mean_outcome: f64,
    /// Latent reasoning quality of the sampled paths.
    pub mean_thinking: f64,
    pub kl_to_ref: f64,
    pub degenerate_groups: usize,
    pub updates: usize,
}

/// Samples and scores one group for `query` from the current policy.
pub fn sample_group<R: Rng + ?Sized>(
    params: &PolicyParams,
    env: &SyntheticEnv,
    query: &Query,
    group_size: usize,
    rng: &mut R,
) -> Result<GroupBatch> {
    let trajectories = params.sample(env, &query.id, group_size, &Avoidance::None, rng)?;
    let rewards = trajectories
        .iter()
        .map(|t| Ok(stage1_reward(format_reward(t, Some(env))?, outcome_reward(t, query))))
        .collect::<Result<Vec<_>>>()?;
    GroupBatch::new(&query.id, trajectories, rewards)
}

/// One pass over `queries`: one group and one update per query.
pub fn grpo_step<R: Rng + ?Sized>(
    params: &mut PolicyParams,
    reference: &PolicySnapshot,
    env: &SyntheticEnv,
    queries: &[Query],
    config: &RunConfig,
    rng: &mut R,
) -> Result<GrpoStepMetrics> {
    let mut m = GrpoStepMetrics::default();
    let mut samples = 0usize;
    for query in queries {
        let old = params.snapshot(SnapshotRole::Behavior);
        let batch = sample_group(params, env, query, config.group_size, rng)?;
        for t in &batch.trajectories {
            let label = label_of(env, t)?;
            m.mean_format += if label.well_formed { 1.0 } else { 0.0 };
            m.mean_outcome += outcome_reward(t, query);
            m.mean_thinking += label.quality;
        }
        m.mean_reward += batch.rewards.iter().sum::<f64>();
        samples += batch.trajectories.len();
        if batch.advantages.iter().all(|&a| a == 0.0) {
            m.degenerate_groups += 1;
        }
        let g = grpo_gradient(params, &old, reference, &batch, config.beta_kl, config.grpo_clip)?;
        params.apply_gradient(&g, config.learning_rate)?;
        m.updates += 1;
    }
    if samples > 0 {
        let s = samples as f64;
        m.mean_reward /= s;
        m.mean_format /= s;
        m.mean_outcome /= s;
        m.mean_thinking /= s;
    }
    if !queries.is_empty() {
        m.kl_to_ref = queries
            .iter()
            .map(|q| params.kl_to(reference, &q.id))
            .sum::<Result<f64>>()?
            / queries.len() as f64;
    }
    tracing::debug!(?m, "grpo step");
    Ok(m)
}
