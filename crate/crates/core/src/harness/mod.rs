//! Evaluation: held-out pass rate, response length, retention, ablations.

pub mod ablation;
pub mod ood;
pub mod plot;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::{accumulate_steps, ExperientialKnowledge, ExtractionConfig, KnowledgeError};
use crate::policy::Policy;
use crate::textgames::{generate_map_in_split, Game, GridMap, MapSplit};
use crate::trajectory::Trajectory;
use crate::trajectory::{collect_trajectory, EpisodeConfig, Outcome};
use crate::util::{mix_seed, par_map};

/// Seeds for held-out maps start here; training seeds are derived by
/// hashing and the split is enforced by map id regardless.
pub const EVAL_MAP_SEED_BASE: u64 = 0x00e7_a100_0000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub game: Game,
    pub num_maps: usize,
    pub num_seeds: usize,
    pub episode: EpisodeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pass_rate: f64,
    pub wins: usize,
    pub episodes: usize,
    /// Pass rate for each evaluation seed.
    pub per_seed: Vec<f64>,
    pub mean_response_tokens: f64,
    pub map_ids: Vec<String>,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("no baseline response length recorded")]
    MissingBaseline,
    #[error("map {0} is used for both training and evaluation")]
    HeldOutLeak(String),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
}

pub fn heldout_maps(game: Game, num_maps: usize) -> Vec<GridMap> {
    (0..num_maps as u64)
        .map(|i| generate_map_in_split(game, EVAL_MAP_SEED_BASE + i, MapSplit::HeldOut).expect("held-out maps exist"))
        .collect()
}

/// Plays every held-out map once per seed. With knowledge, seed `s` uses
/// entry `s mod K`, wrapped around every turn's context.
pub fn eval_pass_rate(policy: &dyn Policy, knowledge: Option<&[ExperientialKnowledge]>, spec: &EvalSpec) -> EvalReport {
    let maps = heldout_maps(spec.game, spec.num_maps);
    let jobs: Vec<(usize, usize)> = (0..spec.num_seeds).flat_map(|s| (0..maps.len()).map(move |m| (s, m))).collect();
    let results = par_map(&jobs, |&(s, m)| {
        let k = knowledge.filter(|k| !k.is_empty()).map(|k| &k[s % k.len()]);
        let seed = mix_seed(mix_seed(EVAL_MAP_SEED_BASE, s as u64), m as u64);
        match collect_trajectory(&maps[m], policy, k, &spec.episode, seed) {
            Ok(t) => {
                let tokens: usize = t.turns.iter().map(|x| x.response_token_count).sum();
                (t.outcome == Outcome::Won, tokens, t.turns.len())
            }
            Err(e) => {
                tracing::warn!("evaluation episode failed: {e}");
                (false, 0, 0)
            }
        }
    });
    let mut per_seed = vec![0usize; spec.num_seeds];
    let (mut tokens, mut turns) = (0usize, 0usize);
    for (&(s, _), &(won, tk, tn)) in jobs.iter().zip(&results) {
        per_seed[s] += won as usize;
        tokens += tk;
        turns += tn;
    }
    let wins: usize = per_seed.iter().sum();
    let episodes = jobs.len();
    EvalReport {
        pass_rate: wins as f64 / episodes.max(1) as f64,
        wins,
        episodes,
        per_seed: per_seed.iter().map(|&w| w as f64 / maps.len().max(1) as f64).collect(),
        mean_response_tokens: tokens as f64 / turns.max(1) as f64,
        map_ids: maps.iter().map(|m| m.map_id.clone()).collect(),
    }
}

/// Mean per-turn response length of `policy` divided by the baseline's.
pub fn eval_response_length(
    policy: &dyn Policy,
    spec: &EvalSpec,
    baseline: Option<&EvalReport>,
) -> Result<f64, HarnessError> {
    let base = baseline.map(|b| b.mean_response_tokens).filter(|&b| b > 0.0).ok_or(HarnessError::MissingBaseline)?;
    Ok(eval_pass_rate(policy, None, spec).mean_response_tokens / base)
}

/// Fails if any evaluation map also appears among training trajectories.
pub fn check_heldout(training: &[Trajectory], eval_map_ids: &[String]) -> Result<(), HarnessError> {
    let train: std::collections::HashSet<&str> = training.iter().map(|t| t.map_id.as_str()).collect();
    match eval_map_ids.iter().find(|id| train.contains(id.as_str())) {
        Some(id) => Err(HarnessError::HeldOutLeak(id.clone())),
        None => Ok(()),
    }
}

/// In-context pass rate after each accumulation step in `steps` (1-based),
/// pooling the `K` seeds of `config`.
pub fn accumulation_curve(
    policy: &dyn Policy,
    trajectories: &[Trajectory],
    extractor: &dyn Policy,
    config: &ExtractionConfig,
    spec: &EvalSpec,
    steps: &[usize],
) -> Result<Vec<(usize, f64)>, HarnessError> {
    let seeds: Vec<u64> = (0..config.k as u64).collect();
    let runs = par_map(&seeds, |&s| accumulate_steps(trajectories, extractor, config, s));
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(steps
        .iter()
        .filter(|&&i| i >= 1 && i <= config.n)
        .map(|&i| {
            let entries: Vec<ExperientialKnowledge> = runs.iter().map(|r| r[i - 1].clone()).collect();
            (i, eval_pass_rate(policy, Some(&entries), spec).pass_rate)
        })
        .collect())
}
