//! Pass@k estimators and reward-distribution summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::reward::{thinking_reward, ThinkingRewardProvider};
use crate::rng::seeded_rng;
use crate::synthenv::SyntheticEnv;
use crate::types::Query;

/// 1 − (1 − p)^k.
pub fn pass_at_k_from_prob(p_correct: f64, k: usize) -> f64 {
    if p_correct >= 1.0 {
        return 1.0;
    }
    -((k as f64) * (-p_correct).ln_1p()).exp_m1()
}

/// Total policy mass on paths whose answer is correct.
pub fn correct_mass(params: &PolicyParams, env: &SyntheticEnv, query_id: &str) -> Result<f64> {
    let probs = params.probs(query_id)?;
    let space = env.space(query_id)?;
    if space.paths.len() != probs.len() {
        return Err(Error::InvalidArgument(format!(
            "policy and env disagree on the path count of {query_id:?}"
        )));
    }
    Ok(space.paths.iter().zip(&probs).filter(|(l, _)| l.is_correct).map(|(_, p)| p).sum::<f64>().min(1.0))
}

pub fn pass_at_k_exact(params: &PolicyParams, env: &SyntheticEnv, query_id: &str, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    Ok(pass_at_k_from_prob(correct_mass(params, env, query_id)?, k))
}

fn binomial(n: u64, k: u64) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // exact at every step: acc * (n - i) is divisible by (i + 1)
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// 1 − C(n−c, k) / C(n, k).
pub fn pass_at_k_unbiased(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n {
        return Err(Error::InvalidArgument(format!("c = {c} exceeds n = {n}")));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} must lie in 1..={n}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let (n64, c64, k64) = (n as u64, c as u64, k as u64);
    if let (Some(total), Some(miss)) = (binomial(n64, k64), binomial(n64 - c64, k64)) {
        return Ok((total - miss) as f64 / total as f64);
    }
    // C(n−c,k)/C(n,k) = Π_{i=n−c+1}^{n} (1 − k/i)
    let miss: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

/// Fraction of `trials` in which at least one of `k` draws is correct.
pub fn pass_at_k_mc<R, F>(k: usize, trials: usize, rng: &mut R, mut draw: F) -> Result<f64>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Result<bool>,
{
    if trials == 0 || k == 0 {
        return Err(Error::InvalidArgument("k and trials must be positive".into()));
    }
    let mut hits = 0usize;
    for _ in 0..trials {
        let mut hit = false;
        for _ in 0..k {
            // keep drawing after a hit so the stream position depends only on (k, trials)
            hit |= draw(rng)?;
        }
        hits += hit as usize;
    }
    Ok(hits as f64 / trials as f64)
}

/// Pass@k for every k in `ks` from the same trials: each trial draws
/// max(ks) samples and scores every prefix, so the curve is monotone in k.
pub fn pass_at_k_mc_curve<R, F>(ks: &[usize], trials: usize, rng: &mut R, mut draw: F) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Result<bool>,
{
    if trials == 0 || ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("ks and trials must be positive".into()));
    }
    let kmax = *ks.iter().max().expect("non-empty");
    let mut hits = vec![0usize; ks.len()];
    for _ in 0..trials {
        // index of the first correct draw, if any
        let mut first = None;
        for i in 0..kmax {
            if draw(rng)? && first.is_none() {
                first = Some(i);
            }
        }
        if let Some(f) = first {
            for (h, &k) in hits.iter_mut().zip(ks) {
                *h += (f < k) as usize;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / trials as f64).collect())
}

/// Temperature-1 sampler over one query's paths reporting correctness.
pub struct CorrectnessSampler {
    dist: WeightedIndex<f64>,
    correct: Vec<bool>,
}

impl CorrectnessSampler {
    pub fn new(params: &PolicyParams, env: &SyntheticEnv, query_id: &str) -> Result<Self> {
        let probs = params.probs(query_id)?;
        let dist = WeightedIndex::new(&probs).map_err(|e| Error::InvalidArgument(format!("sampling weights: {e}")))?;
        let correct = env.space(query_id)?.paths.iter().map(|l| l.is_correct).collect();
        Ok(Self { dist, correct })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> bool {
        self.correct[self.dist.sample(rng)]
    }
}

pub fn pass_at_k_mc_policy<R: Rng + ?Sized>(
    params: &PolicyParams,
    env: &SyntheticEnv,
    query_id: &str,
    k: usize,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    let s = CorrectnessSampler::new(params, env, query_id)?;
    pass_at_k_mc(k, trials, rng, |r| Ok(s.draw(r)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorCurve {
    pub per_query: BTreeMap<String, Vec<f64>>,
    /// Mean over queries, aligned with `ks`.
    pub mean: Vec<f64>,
}

impl EstimatorCurve {
    fn from_rows(ks: usize, rows: BTreeMap<String, Vec<f64>>) -> Self {
        let mut mean = vec![0.0; ks];
        for r in rows.values() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        if !rows.is_empty() {
            mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
        }
        Self { per_query: rows, mean }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtKReport {
    pub ks: Vec<usize>,
    pub samples: usize,
    pub trials: usize,
    pub seed: u64,
    pub exact: EstimatorCurve,
    pub unbiased: EstimatorCurve,
    pub monte_carlo: EstimatorCurve,
}

impl PassAtKReport {
    pub fn mean_exact(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.exact.mean[i])
    }
}

/// All three estimators for every query. `ks` larger than `samples` are
/// rejected since the unbiased estimator needs k ≤ n.
pub fn evaluate_pass_at_k(
    params: &PolicyParams,
    env: &SyntheticEnv,
    queries: &[Query],
    ks: &[usize],
    samples: usize,
    trials: usize,
    seed: u64,
) -> Result<PassAtKReport> {
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > samples) {
        return Err(Error::InvalidArgument(format!("k = {bad} outside 1..={samples}")));
    }
    let mut exact = BTreeMap::new();
    let mut unbiased = BTreeMap::new();
    let mut mc = BTreeMap::new();
    for q in queries {
        let s = CorrectnessSampler::new(params, env, &q.id)?;
        let p = correct_mass(params, env, &q.id)?;
        exact.insert(q.id.clone(), ks.iter().map(|&k| pass_at_k_from_prob(p, k)).collect());

        let mut rng = seeded_rng(seed, &format!("eval-samples/{}", q.id));
        let c = (0..samples).filter(|_| s.draw(&mut rng)).count();
        unbiased.insert(
            q.id.clone(),
            ks.iter().map(|&k| pass_at_k_unbiased(samples, c, k)).collect::<Result<Vec<_>>>()?,
        );

        let mut rng = seeded_rng(seed, &format!("eval-mc/{}", q.id));
        mc.insert(q.id.clone(), pass_at_k_mc_curve(ks, trials, &mut rng, |r| Ok(s.draw(r)))?);
    }
    Ok(PassAtKReport {
        ks: ks.to_vec(),
        samples,
        trials,
        seed,
        exact: EstimatorCurve::from_rows(ks.len(), exact),
        unbiased: EstimatorCurve::from_rows(ks.len(), unbiased),
        monte_carlo: EstimatorCurve::from_rows(ks.len(), mc),
    })
}

/// Plain-text table of mean pass@k per estimator.
pub fn render_pass_at_k_table(reports: &[(&str, &PassAtKReport)]) -> String {
    let mut out = String::new();
    let Some((_, first)) = reports.first() else {
        return out;
    };
    let _ = write!(out, "{:<24}", "policy / estimator");
    for k in &first.ks {
        let _ = write!(out, "{:>10}", format!("pass@{k}"));
    }
    out.push('\n');
    for (name, r) in reports {
        for (est, curve) in [("exact", &r.exact), ("unbiased", &r.unbiased), ("mc", &r.monte_carlo)] {
            let _ = write!(out, "{:<24}", format!("{name} / {est}"));
            for v in &curve.mean {
                let _ = write!(out, "{v:>10.4}");
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardDistribution {
    pub counts: Vec<u64>,
    pub mean: f64,
    pub median: f64,
    pub total: u64,
}

impl RewardDistribution {
    /// Bins `[i/b, (i+1)/b)`, the last one closed at 1.
    pub fn from_values(values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
        }
        let mut counts = vec![0u64; bins];
        for &v in values {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("reward {v} outside [0, 1]")));
            }
            let i = ((v * bins as f64) as usize).min(bins - 1);
            counts[i] += 1;
        }
        let mean = if values.is_empty() { 0.0 } else { values.iter().sum::<f64>() / values.len() as f64 };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = match sorted.len() {
            0 => 0.0,
            n if n % 2 == 1 => sorted[n / 2],
            n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
        };
        Ok(Self {
            counts,
            mean,
            median,
            total: values.len() as u64,
        })
    }

    pub fn render(&self) -> String {
        let bins = self.counts.len();
        let peak = self.counts.iter().copied().max().unwrap_or(0).max(1);
        let mut out = String::new();
        for (i, c) in self.counts.iter().enumerate() {
            let bar = "#".repeat((40 * c / peak) as usize);
            let _ = writeln!(out, "[{:.2}, {:.2}) {c:>7} {bar}", i as f64 / bins as f64, (i + 1) as f64 / bins as f64);
        }
        let _ = writeln!(out, "mean {:.4}  median {:.4}  n {}", self.mean, self.median, self.total);
        out
    }
}

/// Thinking rewards of `samples_per_query` unaugmented draws per query.
pub fn reward_distribution<R: Rng + ?Sized>(
    params: &PolicyParams,
    env: &SyntheticEnv,
    provider: &ThinkingRewardProvider,
    samples_per_query: usize,
    bins: usize,
    rng: &mut R,
) -> Result<RewardDistribution> {
    let mut values = Vec::with_capacity(samples_per_query * env.queries().len());
    for q in env.queries() {
        let trajs = params.sample(env, &q.id, samples_per_query, &crate::policy::Avoidance::None, rng)?;
        for t in &trajs {
            values.push(thinking_reward(provider, q, t, Some(env), rng)?);
        }
    }
    RewardDistribution::from_values(&values, bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthenv::{generate_env, EnvSpec, PathLabel, PathSpace};
    use crate::types::TaskKind;
    use proptest::prelude::*;

    #[test]
    fn closed_form_examples() {
        assert_eq!(pass_at_k_from_prob(0.3, 1), 0.3);
        assert!((pass_at_k_from_prob(0.3, 8) - 0.94235199).abs() < 1e-12);
        assert_eq!(pass_at_k_from_prob(1.0, 5), 1.0);
        assert_eq!(pass_at_k_from_prob(0.0, 5), 0.0);
    }

    #[test]
    fn unbiased_examples() {
        assert_eq!(pass_at_k_unbiased(8, 8, 4).unwrap(), 1.0);
        assert_eq!(pass_at_k_unbiased(8, 0, 4).unwrap(), 0.0);
        assert_eq!(pass_at_k_unbiased(8, 4, 2).unwrap(), 11.0 / 14.0);
        assert!(pass_at_k_unbiased(4, 2, 5).is_err());
        assert!(pass_at_k_unbiased(4, 5, 2).is_err());
    }

    #[test]
    fn unbiased_brute_force() {
        // fraction of k-subsets of n items (first c correct) containing a correct one
        fn brute(n: usize, c: usize, k: usize) -> f64 {
            let (mut hit, mut all) = (0u64, 0u64);
            for mask in 0u32..(1 << n) {
                if mask.count_ones() as usize == k {
                    all += 1;
                    if (0..c).any(|i| mask & (1 << i) != 0) {
                        hit += 1;
                    }
                }
            }
            hit as f64 / all as f64
        }
        for n in 1..=12 {
            for c in 0..=n {
                for k in 1..=n {
                    assert_eq!(pass_at_k_unbiased(n, c, k).unwrap(), brute(n, c, k), "{n} {c} {k}");
                }
            }
        }
    }

    #[test]
    fn unbiased_large_n_uses_product() {
        let v = pass_at_k_unbiased(400, 37, 200).unwrap();
        let prod: f64 = (364..=400).map(|i| 1.0 - 200.0 / i as f64).product();
        assert!((v - (1.0 - prod)).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&v));
    }

    fn two_path_env(p_correct_quality: f64) -> (SyntheticEnv, PolicyParams) {
        let q = Query {
            id: "q".into(),
            prompt: "p".into(),
            image_ref: None,
            task_kind: TaskKind::Numeric,
            reference_answer: "1".into(),
            options: None,
        };
        let paths = (0..2)
            .map(|i| PathLabel {
                path_id: i,
                is_correct: i == 0,
                lucky: false,
                quality: if i == 0 { p_correct_quality } else { 0.0 },
                well_formed: true,
                think_text: String::new(),
                answer_text: if i == 0 { "1".into() } else { "0".into() },
            })
            .collect();
        let env = SyntheticEnv::from_parts(vec![q], vec![PathSpace { query_id: "q".into(), paths }]).unwrap();
        let params = PolicyParams::new(BTreeMap::from([("q".to_string(), vec![0.0, 0.0])])).unwrap();
        (env, params)
    }

    #[test]
    fn deterministic_policy_always_passes() {
        let (env, mut p) = two_path_env(1.0);
        p.set_logits("q", vec![800.0, 0.0]).unwrap();
        let mut rng = seeded_rng(0, "mc");
        for k in [1, 3, 8] {
            assert_eq!(pass_at_k_mc_policy(&p, &env, "q", k, 500, &mut rng).unwrap(), 1.0);
        }
    }

    #[test]
    fn mc_agrees_with_exact() {
        let (env, mut p) = two_path_env(1.0);
        // p_c = 0.3
        p.set_logits("q", vec![0.3f64.ln(), 0.7f64.ln()]).unwrap();
        let exact = pass_at_k_exact(&p, &env, "q", 8).unwrap();
        assert!((exact - 0.94235199).abs() < 1e-12);
        let mc = pass_at_k_mc_policy(&p, &env, "q", 8, 10_000, &mut seeded_rng(1, "mc")).unwrap();
        let sigma = (exact * (1.0 - exact) / 10_000.0).sqrt();
        assert!((mc - exact).abs() < 3.0 * sigma, "{mc} vs {exact}");
    }

    #[test]
    fn mc_curve_matches_single_k() {
        let (env, p) = two_path_env(1.0);
        let s = CorrectnessSampler::new(&p, &env, "q").unwrap();
        let curve = pass_at_k_mc_curve(&[1, 2, 4], 3000, &mut seeded_rng(8, "c"), |r| Ok(s.draw(r))).unwrap();
        assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        for (v, k) in curve.iter().zip([1, 2, 4]) {
            let exact = pass_at_k_from_prob(0.5, k);
            assert!((v - exact).abs() < 3.0 * (exact * (1.0 - exact) / 3000.0).sqrt() + 1e-12);
        }
    }

    #[test]
    fn mc_k1_is_accuracy() {
        let (env, p) = two_path_env(1.0);
        let s = CorrectnessSampler::new(&p, &env, "q").unwrap();
        let mut a = seeded_rng(5, "mc");
        let mut b = seeded_rng(5, "mc");
        let acc = (0..1000).filter(|_| s.draw(&mut a)).count() as f64 / 1000.0;
        assert_eq!(pass_at_k_mc(1, 1000, &mut b, |r| Ok(s.draw(r))).unwrap(), acc);
    }

    #[test]
    fn unbiased_mean_matches_exact() {
        let (env, mut p) = two_path_env(1.0);
        p.set_logits("q", vec![0.3f64.ln(), 0.7f64.ln()]).unwrap();
        let s = CorrectnessSampler::new(&p, &env, "q").unwrap();
        let mut rng = seeded_rng(2, "resample");
        let reps = 2000;
        let vals: Vec<f64> = (0..reps)
            .map(|_| {
                let c = (0..16).filter(|_| s.draw(&mut rng)).count();
                pass_at_k_unbiased(16, c, 4).unwrap()
            })
            .collect();
        let m = vals.iter().sum::<f64>() / reps as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let exact = pass_at_k_from_prob(0.3, 4);
        assert!((m - exact).abs() < 3.0 * (var / reps as f64).sqrt(), "{m} vs {exact}");
    }

    #[test]
    fn top_bin_holds_one() {
        let (env, mut p) = two_path_env(1.0);
        p.set_logits("q", vec![800.0, 0.0]).unwrap();
        let provider = ThinkingRewardProvider::SyntheticOracle { noise_sigma: 0.0 };
        let d = reward_distribution(&p, &env, &provider, 64, 20, &mut seeded_rng(0, "d")).unwrap();
        assert_eq!(d.counts[19], 64);
        assert_eq!(d.counts.iter().sum::<u64>(), 64);
        assert_eq!((d.mean, d.median), (1.0, 1.0));
    }

    #[test]
    fn uniform_over_zero_and_one() {
        let (env, p) = two_path_env(1.0);
        let provider = ThinkingRewardProvider::SyntheticOracle { noise_sigma: 0.0 };
        let n = 4000;
        let d = reward_distribution(&p, &env, &provider, n, 20, &mut seeded_rng(0, "d")).unwrap();
        let sigma = (0.25 / n as f64).sqrt();
        assert!((d.mean - 0.5).abs() < 3.0 * sigma);
        assert_eq!(d.counts[0] + d.counts[19], n as u64);
    }

    #[test]
    fn median_even_and_odd() {
        let d = RewardDistribution::from_values(&[0.1, 0.9, 0.5], 10).unwrap();
        assert_eq!(d.median, 0.5);
        let d = RewardDistribution::from_values(&[0.1, 0.9, 0.5, 0.7], 10).unwrap();
        assert_eq!(d.median, 0.6);
        assert!(RewardDistribution::from_values(&[1.5], 10).is_err());
    }

    #[test]
    fn report_is_reproducible_and_monotone() {
        let (env, params) = generate_env(&EnvSpec { num_queries: 6, ..EnvSpec::default() }, &mut seeded_rng(3, "env")).unwrap();
        let ks = [1, 2, 4, 8, 16];
        let a = evaluate_pass_at_k(&params, &env, env.queries(), &ks, 32, 300, 11).unwrap();
        let b = evaluate_pass_at_k(&params, &env, env.queries(), &ks, 32, 300, 11).unwrap();
        assert_eq!(a, b);
        for curve in [&a.exact, &a.unbiased, &a.monte_carlo] {
            assert!(curve.mean.windows(2).all(|w| w[0] <= w[1]));
        }
        assert!((a.mean_exact(1).unwrap() - 0.3).abs() < 1e-12);
        assert!((a.mean_exact(8).unwrap() - 0.94235199).abs() < 1e-9);
        let table = render_pass_at_k_table(&[("init", &a)]);
        assert!(table.contains("pass@16"));
        assert_eq!(table.lines().count(), 4);
        assert!(evaluate_pass_at_k(&params, &env, env.queries(), &[64], 32, 10, 0).is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_k(p in 0.0f64..=1.0, n in 1usize..40, cf in 0.0f64..=1.0) {
            let c = ((n as f64) * cf).floor() as usize;
            for k in 1..n {
                prop_assert!(pass_at_k_from_prob(p, k) <= pass_at_k_from_prob(p, k + 1));
                prop_assert!(pass_at_k_unbiased(n, c, k).unwrap() <= pass_at_k_unbiased(n, c, k + 1).unwrap());
            }
            let v = pass_at_k_from_prob(p, n);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
