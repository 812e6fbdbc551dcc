//! Synthetic path-space environments exhibiting path selection bias.
//!
//! Every query owns a small, finite set of candidate reasoning paths. At least
//! one path is correct, but the initial policy puts most of its mass on
//! incorrect ones, so Pass@K with large K is far above Pass@1. Some correct
//! paths are "lucky": they reach the right answer through low-quality
//! reasoning, which only the thinking reward can tell apart.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::policy::PolicyParams;
use crate::types::{Query, TaskKind, Trajectory};

/// Quality band of sound correct paths.
pub const SOUND_BAND: (f64, f64) = (0.7, 1.0);
/// Quality band of lucky paths (correct answer, brittle reasoning).
pub const LUCKY_BAND: (f64, f64) = (0.0, 0.2);
/// Quality band of incorrect paths.
pub const FLAWED_BAND: (f64, f64) = (0.2, 0.6);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSpec {
    pub num_queries: usize,
    pub paths_per_query: usize,
    /// Correct paths per query (sound plus lucky).
    pub correct_paths: usize,
    /// Total initial probability on correct paths, per query.
    pub initial_correct_mass: f64,
    /// Share of correct paths that are lucky, floored to a count.
    pub fraction_lucky_paths: f64,
    pub quality_noise_sigma: f64,
    /// Share of incorrect paths that violate the output template.
    pub malformed_fraction: f64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            num_queries: 50,
            paths_per_query: 8,
            correct_paths: 3,
            initial_correct_mass: 0.3,
            fraction_lucky_paths: 0.34,
            quality_noise_sigma: 0.1,
            malformed_fraction: 0.25,
        }
    }
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        let infeasible = |m: String| Err(Error::Infeasible(m));
        if self.num_queries == 0 {
            return infeasible("num_queries must be positive".into());
        }
        if self.paths_per_query < 2 {
            return infeasible("paths_per_query must be at least 2".into());
        }
        if self.correct_paths == 0 || self.correct_paths >= self.paths_per_query {
            return infeasible(format!(
                "correct_paths must lie in [1, {}], got {}",
                self.paths_per_query - 1,
                self.correct_paths
            ));
        }
        let m = self.initial_correct_mass;
        if !(m > 0.0 && m < 1.0) {
            return infeasible(format!("initial_correct_mass must lie in (0, 1), got {m}"));
        }
        if !(0.0..1.0).contains(&self.fraction_lucky_paths) {
            return infeasible(format!(
                "fraction_lucky_paths must lie in [0, 1), got {}",
                self.fraction_lucky_paths
            ));
        }
        if !(self.quality_noise_sigma.is_finite() && self.quality_noise_sigma >= 0.0) {
            return infeasible("quality_noise_sigma must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.malformed_fraction) {
            return infeasible("malformed_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn lucky_per_query(&self) -> usize {
        (self.fraction_lucky_paths * self.correct_paths as f64).floor() as usize
    }

    /// Shared logit of correct paths when incorrect ones sit at zero.
    pub fn correct_logit(&self) -> f64 {
        let m = self.initial_correct_mass;
        let c = self.correct_paths as f64;
        let w = (self.paths_per_query - self.correct_paths) as f64;
        (m * w / (c * (1.0 - m))).ln()
    }
}

/// Ground truth for one candidate path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathLabel {
    pub path_id: usize,
    pub is_correct: bool,
    /// Correct answer reached through low-quality reasoning.
    pub lucky: bool,
    pub quality: f64,
    pub well_formed: bool,
    pub think_text: String,
    pub answer_text: String,
}

impl PathLabel {
    pub fn is_sound(&self) -> bool {
        self.is_correct && !self.lucky
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpace {
    pub query_id: String,
    pub paths: Vec<PathLabel>,
}

/// One line of the env snapshot file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EnvRecord {
    query: Query,
    paths: Vec<PathLabel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEnv {
    queries: Vec<Query>,
    spaces: BTreeMap<String, PathSpace>,
}

impl SyntheticEnv {
    pub fn from_parts(queries: Vec<Query>, spaces: Vec<PathSpace>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for s in spaces {
            if s.paths.len() < 2 {
                return Err(Error::Infeasible(format!("query {:?} has fewer than 2 paths", s.query_id)));
            }
            if !s.paths.iter().any(|p| p.is_correct) {
                return Err(Error::Infeasible(format!("query {:?} has no correct path", s.query_id)));
            }
            if s.paths.iter().enumerate().any(|(i, p)| p.path_id != i) {
                return Err(Error::Infeasible(format!("query {:?}: path ids must be 0..n", s.query_id)));
            }
            map.insert(s.query_id.clone(), s);
        }
        for q in &queries {
            if !map.contains_key(&q.id) {
                return Err(Error::UnknownQuery(q.id.clone()));
            }
        }
        if map.len() != queries.len() {
            return Err(Error::InvalidArgument("path spaces without a query".into()));
        }
        Ok(Self {
            queries,
            spaces: map,
        })
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn space(&self, query_id: &str) -> Result<&PathSpace> {
        self.spaces
            .get(query_id)
            .ok_or_else(|| Error::UnknownQuery(query_id.to_string()))
    }

    pub fn path(&self, query_id: &str, path_id: usize) -> Result<&PathLabel> {
        self.space(query_id)?
            .paths
            .get(path_id)
            .ok_or_else(|| Error::UnknownPath {
                query_id: query_id.to_string(),
                path_id,
            })
    }

    pub fn spaces(&self) -> impl Iterator<Item = &PathSpace> {
        self.spaces.values()
    }

    /// Builds the trajectory a policy draw of `path_id` corresponds to.
    pub fn trajectory(&self, query_id: &str, path_id: usize, logprob: f64) -> Result<Trajectory> {
        let label = self.path(query_id, path_id)?;
        Ok(Trajectory {
            query_id: query_id.to_string(),
            path_id: Some(path_id),
            think_text: label.think_text.clone(),
            answer_text: label.answer_text.clone(),
            logprob_behavior: Some(logprob),
            source: crate::types::Source::FreshSample,
            raw_output: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<EnvRecord> = self
            .queries
            .iter()
            .map(|q| EnvRecord {
                query: q.clone(),
                paths: self.spaces[&q.id].paths.clone(),
            })
            .collect();
        jsonl::write_records(path, &records)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<(usize, EnvRecord)> = jsonl::read_records(path)?;
        let mut queries = Vec::with_capacity(records.len());
        let mut spaces = Vec::with_capacity(records.len());
        for (_, r) in records {
            spaces.push(PathSpace {
                query_id: r.query.id.clone(),
                paths: r.paths,
            });
            queries.push(r.query);
        }
        Self::from_parts(queries, spaces)
    }
}

pub fn label_of<'a>(env: &'a SyntheticEnv, trajectory: &Trajectory) -> Result<&'a PathLabel> {
    let path_id = trajectory.path_id.ok_or_else(|| {
        Error::Unsupported("trajectory carries no path id (not a synthetic sample)".into())
    })?;
    env.path(&trajectory.query_id, path_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PathKind {
    Sound,
    Lucky,
    Flawed,
}

fn draw_quality<R: Rng + ?Sized>(band: (f64, f64), sigma: f64, rng: &mut R) -> f64 {
    let center = 0.5 * (band.0 + band.1);
    let z: f64 = rng.sample(StandardNormal);
    (center + sigma * z).clamp(band.0, band.1)
}

/// Generates the environment and the initial policy that realizes
/// `initial_correct_mass` exactly on every query.
pub fn generate_env<R: Rng + ?Sized>(spec: &EnvSpec, rng: &mut R) -> Result<(SyntheticEnv, PolicyParams)> {
    spec.validate()?;
    let n_paths = spec.paths_per_query;
    let n_lucky = spec.lucky_per_query();
    let n_flawed = n_paths - spec.correct_paths;
    let n_malformed = (spec.malformed_fraction * n_flawed as f64).round() as usize;
    let correct_logit = spec.correct_logit();
    if !correct_logit.is_finite() {
        return Err(Error::Infeasible("initial logits are not finite".into()));
    }
    let width = spec.num_queries.to_string().len().max(3);

    let mut queries = Vec::with_capacity(spec.num_queries);
    let mut spaces = Vec::with_capacity(spec.num_queries);
    let mut logits = BTreeMap::new();
    for qi in 0..spec.num_queries {
        let id = format!("q{qi:0width$}");
        let reference: i64 = rng.random_range(10..100);

        let mut kinds: Vec<PathKind> = std::iter::repeat_n(PathKind::Sound, spec.correct_paths - n_lucky)
            .chain(std::iter::repeat_n(PathKind::Lucky, n_lucky))
            .chain(std::iter::repeat_n(PathKind::Flawed, n_flawed))
            .collect();
        kinds.shuffle(rng);
        let mut flawed_idx: Vec<usize> = (0..n_paths).filter(|&i| kinds[i] == PathKind::Flawed).collect();
        flawed_idx.shuffle(rng);
        let malformed: Vec<usize> = flawed_idx.into_iter().take(n_malformed).collect();

        let mut paths = Vec::with_capacity(n_paths);
        let mut row = Vec::with_capacity(n_paths);
        for (p, kind) in kinds.iter().enumerate() {
            let (band, think, answer) = match kind {
                PathKind::Sound => (
                    SOUND_BAND,
                    format!("[{id}/p{p}] Set up the quantities, derive each step, verify the result."),
                    reference.to_string(),
                ),
                PathKind::Lucky => (
                    LUCKY_BAND,
                    format!("[{id}/p{p}] Guess a value, skip the check, steps contradict each other."),
                    reference.to_string(),
                ),
                PathKind::Flawed => {
                    let mut offset: i64 = rng.random_range(-9..9);
                    if offset >= 0 {
                        offset += 1;
                    }
                    (
                        FLAWED_BAND,
                        format!("[{id}/p{p}] Plausible steps with one misread quantity carried through."),
                        (reference + offset).to_string(),
                    )
                }
            };
            let quality = draw_quality(band, spec.quality_noise_sigma, rng);
            let is_correct = *kind != PathKind::Flawed;
            row.push(if is_correct { correct_logit } else { 0.0 });
            paths.push(PathLabel {
                path_id: p,
                is_correct,
                lucky: *kind == PathKind::Lucky,
                quality,
                well_formed: !malformed.contains(&p),
                think_text: think,
                answer_text: answer,
            });
        }
        queries.push(Query {
            id: id.clone(),
            prompt: format!("Synthetic problem {qi}: compute the target quantity."),
            image_ref: None,
            task_kind: TaskKind::Numeric,
            reference_answer: reference.to_string(),
            options: None,
        });
        spaces.push(PathSpace {
            query_id: id.clone(),
            paths,
        });
        logits.insert(id, row);
    }
    let env = SyntheticEnv::from_parts(queries, spaces)?;
    let params = PolicyParams::new(logits)?;
    Ok((env, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn correct_mass(env: &SyntheticEnv, params: &PolicyParams, qid: &str) -> f64 {
        let probs = params.probs(qid).unwrap();
        env.space(qid)
            .unwrap()
            .paths
            .iter()
            .filter(|p| p.is_correct)
            .map(|p| probs[p.path_id])
            .sum()
    }

    #[test]
    fn initial_correct_mass_is_exact() {
        let spec = EnvSpec::default();
        let (env, params) = generate_env(&spec, &mut seeded_rng(1, "env")).unwrap();
        for q in env.queries() {
            assert!((correct_mass(&env, &params, &q.id) - 0.3).abs() < 1e-9);
            assert!(env.space(&q.id).unwrap().paths.iter().any(|p| p.is_correct));
        }
    }

    #[test]
    fn mass_target_holds_across_shapes() {
        for (paths, correct, m) in [(2, 1, 0.01), (8, 3, 0.3), (16, 1, 0.9), (5, 4, 0.5)] {
            let spec = EnvSpec {
                num_queries: 3,
                paths_per_query: paths,
                correct_paths: correct,
                initial_correct_mass: m,
                ..Default::default()
            };
            let (env, params) = generate_env(&spec, &mut seeded_rng(3, "env")).unwrap();
            for q in env.queries() {
                assert!((correct_mass(&env, &params, &q.id) - m).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn no_lucky_paths_means_sound_band() {
        let spec = EnvSpec {
            fraction_lucky_paths: 0.0,
            ..Default::default()
        };
        let (env, _) = generate_env(&spec, &mut seeded_rng(2, "env")).unwrap();
        for s in env.spaces() {
            for p in s.paths.iter().filter(|p| p.is_correct) {
                assert!(!p.lucky);
                assert!(p.quality >= SOUND_BAND.0 && p.quality <= SOUND_BAND.1);
            }
        }
    }

    #[test]
    fn lucky_paths_sit_in_low_band() {
        let (env, _) = generate_env(&EnvSpec::default(), &mut seeded_rng(5, "env")).unwrap();
        let lucky: Vec<_> = env.spaces().flat_map(|s| s.paths.iter()).filter(|p| p.lucky).collect();
        assert_eq!(lucky.len(), 50);
        assert!(lucky.iter().all(|p| p.is_correct && p.quality <= 0.2));
    }

    #[test]
    fn infeasible_specs_rejected() {
        let zero = EnvSpec {
            initial_correct_mass: 0.0,
            ..Default::default()
        };
        assert!(matches!(generate_env(&zero, &mut seeded_rng(0, "env")), Err(Error::Infeasible(_))));
        let one_path = EnvSpec {
            paths_per_query: 1,
            ..Default::default()
        };
        assert!(generate_env(&one_path, &mut seeded_rng(0, "env")).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = EnvSpec::default();
        let a = generate_env(&spec, &mut seeded_rng(9, "env")).unwrap();
        let b = generate_env(&spec, &mut seeded_rng(9, "env")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn label_lookup() {
        let (env, _) = generate_env(&EnvSpec::default(), &mut seeded_rng(4, "env")).unwrap();
        let space = env.space("q000").unwrap();
        let correct = space.paths.iter().find(|p| p.is_correct).unwrap();
        let t = env.trajectory("q000", correct.path_id, -1.0).unwrap();
        assert!(label_of(&env, &t).unwrap().is_correct);

        let malformed = space.paths.iter().find(|p| !p.well_formed).unwrap();
        let t = env.trajectory("q000", malformed.path_id, -1.0).unwrap();
        assert!(!label_of(&env, &t).unwrap().well_formed);

        let mut bad = t.clone();
        bad.path_id = Some(99);
        assert!(matches!(label_of(&env, &bad), Err(Error::UnknownPath { .. })));
        bad.query_id = "nope".into();
        assert!(matches!(label_of(&env, &bad), Err(Error::UnknownQuery(_))));
    }

    #[test]
    fn snapshot_round_trip() {
        let (env, _) = generate_env(&EnvSpec::default(), &mut seeded_rng(6, "env")).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        env.save(f.path()).unwrap();
        assert_eq!(SyntheticEnv::load(f.path()).unwrap(), env);
    }
}
