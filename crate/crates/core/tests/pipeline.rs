use pathsel::config::RunConfig;
use pathsel::pipeline::{mean_pass_at_k, run_stage1, run_stage2};
use pathsel::policy::PolicyParams;
use pathsel::report::{read_report, write_report};
use pathsel::rng::seeded_rng;
use pathsel::synthenv::{generate_env, EnvSpec, SyntheticEnv};

fn small() -> (EnvSpec, RunConfig) {
    let spec = EnvSpec {
        num_queries: 12,
        ..EnvSpec::default()
    };
    let config = RunConfig {
        grpo_iterations: 10,
        epochs: 2,
        seed: 5,
        ..RunConfig::default()
    };
    (spec, config)
}

#[test]
fn stages_resume_from_files() {
    let (spec, config) = small();
    let (env, init) = generate_env(&spec, &mut seeded_rng(5, "env")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    env.save(&dir.path().join("env.jsonl")).unwrap();
    init.save(&dir.path().join("init.jsonl")).unwrap();

    let direct = run_stage1(&env, &init, &config).unwrap();
    let env2 = SyntheticEnv::load(&dir.path().join("env.jsonl")).unwrap();
    let init2 = PolicyParams::load(&dir.path().join("init.jsonl")).unwrap();
    let resumed = run_stage1(&env2, &init2, &config).unwrap();
    assert_eq!(direct.records, resumed.records);

    direct.params.save(&dir.path().join("s1.jsonl")).unwrap();
    let s1 = PolicyParams::load(&dir.path().join("s1.jsonl")).unwrap();
    let a = run_stage2(&env, &direct.params, &config, direct.updates, None).unwrap();
    let b = run_stage2(&env2, &s1, &config, direct.updates, None).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.params.logits("q000").unwrap(), b.params.logits("q000").unwrap());

    write_report(&dir.path().join("m.jsonl"), &a.records).unwrap();
    assert_eq!(read_report(&dir.path().join("m.jsonl")).unwrap(), a.records);
}

#[test]
fn record_steps_are_cumulative() {
    let (spec, config) = small();
    let (env, init) = generate_env(&spec, &mut seeded_rng(6, "env")).unwrap();
    let s1 = run_stage1(&env, &init, &config).unwrap();
    let s2 = run_stage2(&env, &s1.params, &config, s1.updates, None).unwrap();
    let steps: Vec<u64> = s1.records.iter().chain(&s2.records).map(|r| r.step).collect();
    assert!(steps.windows(2).all(|w| w[0] < w[1]), "{steps:?}");
    assert_eq!(*steps.last().unwrap(), s1.updates + s2.state.updates);
    assert!(s2.records.iter().all(|r| r.query_id.is_some() && r.loss.is_some()));
}

#[test]
fn both_stages_raise_accuracy() {
    let (spec, config) = small();
    let (env, init) = generate_env(&spec, &mut seeded_rng(7, "env")).unwrap();
    let s1 = run_stage1(&env, &init, &config).unwrap();
    let s2 = run_stage2(&env, &s1.params, &config, s1.updates, None).unwrap();
    let p0 = mean_pass_at_k(&init, &env, 1).unwrap();
    let p1 = mean_pass_at_k(&s1.params, &env, 1).unwrap();
    let p2 = mean_pass_at_k(&s2.params, &env, 1).unwrap();
    assert!(p0 < p1 && p1 < p2, "{p0} {p1} {p2}");
}
