//! One function per verb. Each reads finished artifacts from the output
//! directory and writes its own into the staging directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use pathsel::backend::{
    export_pairs, remote_pass_at_k, run_remote_stage2, ChatClient, HttpTransport, PairExporter, RemoteJudge,
    RetryPolicy,
};
use pathsel::backend::chat::ENDPOINT_VAR;
use pathsel::config::{FileConfig, ModeConfig, ModeKind};
use pathsel::dataset::load_dataset;
use pathsel::dpo::{offline_pairs, PairSink};
use pathsel::evalkit::{evaluate_pass_at_k, render_pass_at_k_table};
use pathsel::jsonl;
use pathsel::nrm::MemoryBank;
use pathsel::pipeline::{mean_pass_at_k, render_ablation_table, run_ablation, run_stage1, run_stage2, thinking_distribution};
use pathsel::policy::PolicyParams;
use pathsel::report::{read_report, write_report};
use pathsel::reward::{Scorer, ThinkingRewardProvider};
use pathsel::rng::seeded_rng;
use pathsel::synthenv::{generate_env, SyntheticEnv};
use pathsel::types::Query;

use crate::staging::Staging;

pub const CONFIG: &str = "config.toml";
pub const ENV: &str = "env.jsonl";
pub const POLICY_INIT: &str = "policy_init.jsonl";
pub const POLICY_STAGE1: &str = "policy_stage1.jsonl";
pub const POLICY_STAGE2: &str = "policy_stage2.jsonl";
pub const METRICS_STAGE1: &str = "metrics_stage1.jsonl";
pub const METRICS_STAGE2: &str = "metrics_stage2.jsonl";
pub const METRICS_REMOTE: &str = "metrics_remote.jsonl";
pub const MEMORY: &str = "memory.jsonl";
pub const PAIRS: &str = "pairs.jsonl";
pub const PASS_AT_K: &str = "pass_at_k.json";
pub const PASS_AT_K_TABLE: &str = "pass_at_k.txt";
pub const DISTRIBUTIONS: &str = "distributions.json";
pub const DISTRIBUTIONS_TEXT: &str = "distributions.txt";
pub const ABLATION: &str = "ablation.json";
pub const ABLATION_TABLE: &str = "ablation.txt";

pub struct Ctx {
    pub cfg: FileConfig,
    pub out: PathBuf,
}

impl Ctx {
    fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Path of a finished artifact, or a stage-order error naming the verb
    /// that produces it.
    fn require(&self, name: &str, producer: &str, consumer: &str) -> Result<PathBuf> {
        let p = self.artifact(name);
        if !p.is_file() {
            bail!(
                "{consumer} needs {} from a previous stage; run `{producer}` first",
                p.display()
            );
        }
        Ok(p)
    }

    fn synthetic_only(&self, verb: &str) -> Result<()> {
        if self.cfg.mode.kind == ModeKind::Remote {
            bail!("{verb} works on synthetic environments only; remote mode has no local policy to train");
        }
        Ok(())
    }

    fn load_env(&self, consumer: &str) -> Result<(SyntheticEnv, PolicyParams)> {
        let env = SyntheticEnv::load(&self.require(ENV, "gen-env", consumer)?)?;
        let init = PolicyParams::load(&self.require(POLICY_INIT, "gen-env", consumer)?)?;
        Ok((env, init))
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_env(ctx: &Ctx, st: &Staging) -> Result<()> {
    ctx.synthetic_only("gen-env")?;
    let (env, init) = generate_env(&ctx.cfg.env, &mut seeded_rng(ctx.cfg.run.seed, "env"))?;
    env.save(&st.path(ENV))?;
    init.save(&st.path(POLICY_INIT))?;
    fs::write(st.path(CONFIG), ctx.cfg.to_toml_string())?;
    println!(
        "env: {} queries x {} paths, initial pass@1 {:.4}",
        env.queries().len(),
        ctx.cfg.env.paths_per_query,
        mean_pass_at_k(&init, &env, 1)?
    );
    Ok(())
}

pub fn run_grpo(ctx: &Ctx, st: &Staging) -> Result<()> {
    ctx.synthetic_only("run-grpo")?;
    let (env, init) = ctx.load_env("run-grpo")?;
    let out = run_stage1(&env, &init, &ctx.cfg.run)?;
    out.params.save(&st.path(POLICY_STAGE1))?;
    write_report(&st.path(METRICS_STAGE1), &out.records)?;
    println!(
        "stage I: {} updates, pass@1 {:.4} -> {:.4}",
        out.updates,
        mean_pass_at_k(&init, &env, 1)?,
        mean_pass_at_k(&out.params, &env, 1)?
    );
    Ok(())
}

pub fn run_pso(ctx: &Ctx, st: &Staging) -> Result<()> {
    if ctx.cfg.mode.kind == ModeKind::Remote {
        return remote_stage2(ctx, st);
    }
    let (env, _) = ctx.load_env("run-pso")?;
    let stage1 = PolicyParams::load(&ctx.require(POLICY_STAGE1, "run-grpo", "run-pso")?)?;
    let offset = match ctx.artifact(METRICS_STAGE1) {
        p if p.is_file() => read_report(&p)?.last().map_or(0, |r| r.step),
        _ => 0,
    };
    let mut exporter = if ctx.cfg.mode.export_pairs {
        Some(PairExporter::open(&st.path(PAIRS), env.queries())?)
    } else {
        None
    };
    let out = run_stage2(&env, &stage1, &ctx.cfg.run, offset, exporter.as_mut().map(|e| e as &mut dyn PairSink))?;
    out.params.save(&st.path(POLICY_STAGE2))?;
    out.state.bank.persist(&st.path(MEMORY))?;
    write_report(&st.path(METRICS_STAGE2), &out.records)?;
    let t = out.totals();
    println!(
        "stage II: {} updates, {} skipped, pass@1 {:.4} -> {:.4}, {} entries in memory",
        out.state.updates,
        t.skipped,
        mean_pass_at_k(&stage1, &env, 1)?,
        mean_pass_at_k(&out.params, &env, 1)?,
        out.state.bank.total_len()
    );
    Ok(())
}

fn remote_clients(mode: &ModeConfig) -> Result<(ChatClient, RemoteJudge)> {
    let endpoint = std::env::var(ENDPOINT_VAR)
        .ok()
        .or_else(|| mode.endpoint.clone())
        .ok_or_else(|| anyhow!("config key `endpoint`: remote mode needs [mode].endpoint or {ENDPOINT_VAR}"))?;
    let generator = ChatClient {
        transport: Arc::new(HttpTransport::from_env(Duration::from_secs(mode.timeout_secs))),
        endpoint,
        model: mode.model.clone(),
        temperature: mode.temperature,
        retry: RetryPolicy::default(),
    };
    let judge = RemoteJudge {
        client: ChatClient {
            model: mode.judge_model.clone().unwrap_or_else(|| mode.model.clone()),
            temperature: 0.0,
            ..generator.clone()
        },
    };
    Ok((generator, judge))
}

fn remote_dataset(mode: &ModeConfig) -> Result<Vec<Query>> {
    let path = mode
        .dataset
        .as_ref()
        .ok_or_else(|| anyhow!("config key `dataset`: remote mode needs a dataset file"))?;
    Ok(load_dataset(Path::new(path))?)
}

/// Sampling, judging and memory against the endpoint; pairs are the product.
fn remote_stage2(ctx: &Ctx, st: &Staging) -> Result<()> {
    let mode = &ctx.cfg.mode;
    let queries = remote_dataset(mode)?;
    let (generator, judge) = remote_clients(mode)?;
    let mut bank = MemoryBank::new(ctx.cfg.run.memory_capacity);
    let mut exporter = PairExporter::open(&st.path(PAIRS), &queries)?;
    let rows = run_remote_stage2(
        &generator,
        &judge,
        &queries,
        &ctx.cfg.run,
        mode.max_concurrency,
        &mut bank,
        Some(&mut exporter),
    )?;
    bank.persist(&st.path(MEMORY))?;
    jsonl::write_records(&st.path(METRICS_REMOTE), &rows)?;
    println!(
        "remote stage II: {} query visits, {} pairs, {} entries in memory",
        rows.len(),
        exporter.written(),
        bank.total_len()
    );
    Ok(())
}

/// The most trained synthetic policy on disk.
fn latest_policy(ctx: &Ctx, consumer: &str) -> Result<(&'static str, PolicyParams)> {
    for (label, name) in [("stage2", POLICY_STAGE2), ("stage1", POLICY_STAGE1)] {
        let p = ctx.artifact(name);
        if p.is_file() {
            return Ok((label, PolicyParams::load(&p)?));
        }
    }
    ctx.require(POLICY_STAGE1, "run-grpo", consumer)?;
    unreachable!("require fails when no checkpoint exists")
}

pub fn eval(ctx: &Ctx, st: &Staging) -> Result<()> {
    let run = &ctx.cfg.run;
    if ctx.cfg.mode.kind == ModeKind::Remote {
        let queries = remote_dataset(&ctx.cfg.mode)?;
        let (generator, _) = remote_clients(&ctx.cfg.mode)?;
        let rows = remote_pass_at_k(&generator, &queries, &run.eval_ks, run.eval_samples)?;
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..run.eval_ks.len()).map(|i| rows.iter().map(|r| r.1[i]).sum::<f64>() / n).collect();
        let per_query: BTreeMap<String, Vec<f64>> = rows.into_iter().collect();
        write_json(
            &st.path(PASS_AT_K),
            &serde_json::json!({ "ks": run.eval_ks, "samples": run.eval_samples, "unbiased": { "per_query": per_query, "mean": mean } }),
        )?;
        return Ok(());
    }

    let (env, init) = ctx.load_env("eval")?;
    let mut policies = vec![("init", init)];
    for (label, name) in [("stage1", POLICY_STAGE1), ("stage2", POLICY_STAGE2)] {
        let p = ctx.artifact(name);
        if p.is_file() {
            policies.push((label, PolicyParams::load(&p)?));
        }
    }
    let mut reports = BTreeMap::new();
    let mut dists = BTreeMap::new();
    for (label, params) in &policies {
        let r = evaluate_pass_at_k(params, &env, env.queries(), &run.eval_ks, run.eval_samples, run.eval_trials, run.seed)?;
        reports.insert(label.to_string(), r);
        dists.insert(label.to_string(), thinking_distribution(params, &env, run, label)?);
    }
    write_json(&st.path(PASS_AT_K), &reports)?;
    write_json(&st.path(DISTRIBUTIONS), &dists)?;

    let ordered: Vec<(&str, &_)> = policies.iter().map(|(l, _)| (*l, &reports[*l])).collect();
    let table = render_pass_at_k_table(&ordered);
    fs::write(st.path(PASS_AT_K_TABLE), &table)?;
    let mut text = String::new();
    for (label, _) in &policies {
        text.push_str(&format!("thinking reward, {label}\n{}\n", dists[*label].render()));
    }
    fs::write(st.path(DISTRIBUTIONS_TEXT), &text)?;
    print!("{table}");
    Ok(())
}

pub fn export(ctx: &Ctx, st: &Staging) -> Result<()> {
    if ctx.cfg.mode.kind == ModeKind::Remote {
        return remote_stage2(ctx, st);
    }
    let (env, _) = ctx.load_env("export-pairs")?;
    let (label, params) = latest_policy(ctx, "export-pairs")?;
    let run = &ctx.cfg.run;
    let provider = ThinkingRewardProvider::SyntheticOracle {
        noise_sigma: run.thinking_noise_sigma,
    };
    let scorer = Scorer {
        env: Some(&env),
        provider: &provider,
        lambda: run.effective_lambda(),
    };
    let mut rng = seeded_rng(run.seed, "export-pairs");
    let (pairs, m) = offline_pairs(&params, &env, env.queries(), run, &scorer, &mut rng)?;
    let n = export_pairs(&pairs, env.queries(), &st.path(PAIRS))?;
    println!("{n} pairs from the {label} policy, {} queries without contrast", m.skipped);
    Ok(())
}

pub fn ablate(ctx: &Ctx, st: &Staging) -> Result<()> {
    ctx.synthetic_only("ablate")?;
    let (env, init) = ctx.load_env("ablate")?;
    let out = run_ablation(&env, &init, &ctx.cfg.run)?;
    write_json(&st.path(ABLATION), &out.results)?;
    let table = render_ablation_table(&out.results);
    fs::write(st.path(ABLATION_TABLE), &table)?;
    print!("{table}");
    Ok(())
}
