//! Stage I, Stage II and the ablation grid on a synthetic env.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dpo::{offline_pairs, offline_update, pso_query_step, PairSink, PsoEpochMetrics, PsoState};
use crate::error::Result;
use crate::evalkit::{correct_mass, pass_at_k_from_prob, reward_distribution, RewardDistribution};
use crate::grpo::{grpo_step, GrpoStepMetrics};
use crate::policy::{PolicyParams, SnapshotRole};
use crate::report::{MetricRecord, Stage};
use crate::reward::{Scorer, ThinkingRewardProvider};
use crate::rng::seeded_rng;
use crate::synthenv::SyntheticEnv;

/// Mean over queries of the exact probability of a correct answer.
pub fn mean_pass_at_k(params: &PolicyParams, env: &SyntheticEnv, k: usize) -> Result<f64> {
    let qs = env.queries();
    let mut s = 0.0;
    for q in qs {
        s += pass_at_k_from_prob(correct_mass(params, env, &q.id)?, k);
    }
    Ok(s / qs.len().max(1) as f64)
}

fn mean_over_paths(params: &PolicyParams, env: &SyntheticEnv, f: impl Fn(&crate::synthenv::PathLabel) -> f64) -> Result<f64> {
    let qs = env.queries();
    let mut s = 0.0;
    for q in qs {
        let probs = params.probs(&q.id)?;
        s += env.space(&q.id)?.paths.iter().zip(&probs).map(|(l, p)| p * f(l)).sum::<f64>();
    }
    Ok(s / qs.len().max(1) as f64)
}

/// Mean policy mass on correct paths with sound (not lucky) reasoning.
pub fn sound_mass(params: &PolicyParams, env: &SyntheticEnv) -> Result<f64> {
    mean_over_paths(params, env, |l| if l.is_sound() { 1.0 } else { 0.0 })
}

pub fn lucky_mass(params: &PolicyParams, env: &SyntheticEnv) -> Result<f64> {
    mean_over_paths(params, env, |l| if l.lucky { 1.0 } else { 0.0 })
}

/// Mean latent reasoning quality under the policy.
pub fn expected_thinking(params: &PolicyParams, env: &SyntheticEnv) -> Result<f64> {
    mean_over_paths(params, env, |l| l.quality)
}

fn mean_kl(params: &PolicyParams, reference: &crate::policy::PolicySnapshot, env: &SyntheticEnv) -> Result<f64> {
    let qs = env.queries();
    let mut s = 0.0;
    for q in qs {
        s += params.kl_to(reference, &q.id)?;
    }
    Ok(s / qs.len().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub params: PolicyParams,
    pub steps: Vec<GrpoStepMetrics>,
    pub records: Vec<MetricRecord>,
    pub updates: u64,
}

/// `grpo_iterations` passes of GRPO, with the entry policy as reference.
pub fn run_stage1(env: &SyntheticEnv, init: &PolicyParams, config: &RunConfig) -> Result<Stage1Output> {
    config.validate()?;
    let mut params = init.clone();
    let reference = params.snapshot(SnapshotRole::Reference);
    let mut rng = seeded_rng(config.seed, "grpo-sampling");
    let lambda = config.effective_lambda();
    let k = config.group_size;
    let mut steps = Vec::with_capacity(config.grpo_iterations);
    let mut records = Vec::with_capacity(config.grpo_iterations);
    let mut updates = 0u64;
    for _ in 0..config.grpo_iterations {
        let m = grpo_step(&mut params, &reference, env, env.queries(), config, &mut rng)?;
        updates += m.updates as u64;
        records.push(MetricRecord {
            step: updates,
            stage: Stage::Grpo,
            mean_composite: lambda * m.mean_thinking + (1.0 - lambda) * m.mean_outcome,
            mean_outcome: m.mean_outcome,
            mean_thinking: m.mean_thinking,
            pass_at_1: mean_pass_at_k(&params, env, 1)?,
            pass_at_k: mean_pass_at_k(&params, env, k)?,
            k,
            kl_to_ref: m.kl_to_ref,
            expected_thinking: Some(expected_thinking(&params, env)?),
            query_id: None,
            loss: None,
            margin: None,
        });
        steps.push(m);
    }
    Ok(Stage1Output {
        params,
        steps,
        records,
        updates,
    })
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub params: PolicyParams,
    pub state: PsoState,
    pub epochs: Vec<PsoEpochMetrics>,
    pub records: Vec<MetricRecord>,
}

impl Stage2Output {
    pub fn totals(&self) -> PsoEpochMetrics {
        let mut t = PsoEpochMetrics::default();
        for e in &self.epochs {
            t.merge(e.clone());
        }
        t
    }
}

/// Stage II from the Stage-I policy. `step_offset` continues the update
/// count of Stage I in the records.
pub fn run_stage2(
    env: &SyntheticEnv,
    stage1: &PolicyParams,
    config: &RunConfig,
    step_offset: u64,
    mut sink: Option<&mut (dyn PairSink + '_)>,
) -> Result<Stage2Output> {
    config.validate()?;
    let mut params = stage1.clone();
    let mut state = PsoState::new(&params, config);
    let provider = ThinkingRewardProvider::SyntheticOracle {
        noise_sigma: config.thinking_noise_sigma,
    };
    let scorer = Scorer {
        env: Some(env),
        provider: &provider,
        lambda: config.effective_lambda(),
    };
    let mut rng = seeded_rng(config.seed, "pso-sampling");
    let k = config.group_size;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut records = Vec::new();

    let offline = if config.offline_dpo_mode {
        let (pairs, _) = offline_pairs(&params, env, env.queries(), config, &scorer, &mut rng)?;
        if let Some(s) = sink.as_deref_mut() {
            for p in &pairs {
                s.write_pair(p)?;
            }
        }
        Some(pairs)
    } else {
        None
    };

    let global = |params: &PolicyParams| -> Result<(f64, f64, f64)> {
        Ok((mean_pass_at_k(params, env, 1)?, mean_pass_at_k(params, env, k)?, expected_thinking(params, env)?))
    };
    for _ in 0..config.epochs {
        state.epoch += 1;
        let mut m = PsoEpochMetrics::default();
        let n_items = offline.as_ref().map_or(env.queries().len(), Vec::len);
        for i in 0..n_items {
            let applied = match &offline {
                Some(pairs) => {
                    offline_update(&mut params, &mut state, &pairs[i], config, &mut m)?;
                    true
                }
                None => pso_query_step(
                    &mut params,
                    &mut state,
                    env,
                    &env.queries()[i],
                    config,
                    &scorer,
                    &mut rng,
                    sink.as_deref_mut(),
                    &mut m,
                )?,
            };
            if !applied {
                continue;
            }
            let row = m.rows.last().expect("an applied update leaves a row");
            let (p1, pk, think) = global(&params)?;
            records.push(MetricRecord {
                step: step_offset + state.updates,
                stage: Stage::Pso,
                mean_composite: row.mean_composite,
                mean_outcome: row.mean_outcome,
                mean_thinking: row.mean_thinking,
                pass_at_1: p1,
                pass_at_k: pk,
                k,
                kl_to_ref: row.kl_to_ref,
                expected_thinking: Some(think),
                query_id: Some(row.query_id.clone()),
                loss: Some(row.loss),
                margin: Some(row.margin),
            });
        }
        epochs.push(m);
    }
    Ok(Stage2Output {
        params,
        state,
        epochs,
        records,
    })
}

/// Summary numbers for one trained policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub pass_at_1: f64,
    pub pass_at_8: f64,
    pub sound_mass: f64,
    pub lucky_mass: f64,
    pub expected_thinking: f64,
    pub kl_to_stage1: f64,
}

pub fn summarize(params: &PolicyParams, env: &SyntheticEnv, stage1: &PolicyParams) -> Result<PolicySummary> {
    Ok(PolicySummary {
        pass_at_1: mean_pass_at_k(params, env, 1)?,
        pass_at_8: mean_pass_at_k(params, env, 8)?,
        sound_mass: sound_mass(params, env)?,
        lucky_mass: lucky_mass(params, env)?,
        expected_thinking: expected_thinking(params, env)?,
        kl_to_stage1: mean_kl(params, &stage1.snapshot(SnapshotRole::Reference), env)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoThinkingReward,
    NoOnlineDpo,
    NoMemory,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoThinkingReward, Variant::NoOnlineDpo, Variant::NoMemory];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoThinkingReward => "w/o thinking reward",
            Variant::NoOnlineDpo => "w/o online DPO",
            Variant::NoMemory => "w/o memory retrieval",
        }
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoThinkingReward => c.disable_thinking_reward = true,
            Variant::NoOnlineDpo => c.offline_dpo_mode = true,
            Variant::NoMemory => c.disable_memory = true,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub summary: PolicySummary,
    pub reselection_rate: f64,
    pub updates: u64,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct AblationOutput {
    pub stage1: Stage1Output,
    pub results: Vec<VariantResult>,
}

/// One shared Stage I, then every Stage-II variant from the same policy and
/// the same seeds.
pub fn run_ablation(env: &SyntheticEnv, init: &PolicyParams, config: &RunConfig) -> Result<AblationOutput> {
    let stage1 = run_stage1(env, init, config)?;
    let mut results = Vec::with_capacity(Variant::ALL.len());
    for v in Variant::ALL {
        let c = v.apply(config);
        let out = run_stage2(env, &stage1.params, &c, stage1.updates, None)?;
        let t = out.totals();
        results.push(VariantResult {
            variant: v,
            summary: summarize(&out.params, env, &stage1.params)?,
            reselection_rate: t.reselection_rate(),
            updates: out.state.updates,
            skipped: t.skipped,
        });
    }
    Ok(AblationOutput { stage1, results })
}

pub fn render_ablation_table(results: &[VariantResult]) -> String {
    use std::fmt::Write as _;
    let mut out = format!(
        "{:<22}{:>10}{:>10}{:>12}{:>12}{:>12}{:>12}\n",
        "variant", "pass@1", "pass@8", "sound mass", "lucky mass", "thinking", "reselect"
    );
    for r in results {
        let s = &r.summary;
        let _ = writeln!(
            out,
            "{:<22}{:>10.4}{:>10.4}{:>12.4}{:>12.4}{:>12.4}{:>12.4}",
            r.variant.label(),
            s.pass_at_1,
            s.pass_at_8,
            s.sound_mass,
            s.lucky_mass,
            s.expected_thinking,
            r.reselection_rate
        );
    }
    out
}

/// Sampled thinking-reward histogram with the oracle provider.
pub fn thinking_distribution(params: &PolicyParams, env: &SyntheticEnv, config: &RunConfig, label: &str) -> Result<RewardDistribution> {
    let provider = ThinkingRewardProvider::SyntheticOracle {
        noise_sigma: config.thinking_noise_sigma,
    };
    let mut rng = seeded_rng(config.seed, &format!("distribution/{label}"));
    reward_distribution(params, env, &provider, config.distribution_samples, config.histogram_bins, &mut rng)
}
