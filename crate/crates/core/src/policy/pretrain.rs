//! Synthetic pretraining for the toy base model.
//!
//! A real base model arrives knowing how to read instructions. The toy one
//! gets that from imitation of a hand-written reference policy whose
//! behaviour depends on which rules a knowledge wrapper states:
//!
//! * without knowledge it moves uniformly at random, forgets the brackets
//!   a fifth of the time, and rambles;
//! * each stated rule (brackets, holes, borders, goal direction, walls)
//!   suppresses the moves that rule warns against;
//! * raw transcripts in the wrapper carry no stated rules and change
//!   nothing but the rambling.
//!
//! It also learns a small instruction-following suite used to measure
//! retention after consolidation.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scripted::latest_state;
use super::toy::{ToyConfig, ToyModel};
use super::vocab::{TokenId, Vocab};
use super::{Policy, PolicyError, Response, TokenDistribution};
use crate::chat::Chat;
use crate::harness::ood::OOD_SUITE;
use crate::knowledge::scripted::Facet;
use crate::knowledge::{ExperientialKnowledge, KnowledgeFormat, ITEM_MARKER};
use crate::textgames::{generate_map_in_split, Cell, Direction, Game, GridMap, MapSplit};
use crate::trajectory::{collect_trajectory, turn_chat, EpisodeConfig};
use crate::util::{mix_seed, par_map};

/// Filler vocabulary for the free-text part of a reply.
pub const RATIONALE_WORDS: [&str; 16] = [
    "think", "this", "move", "looks", "fine", "because", "the", "path", "seems", "clear", "so", "let", "me", "try",
    "it", "now",
];

const BARE_MOVES: [&str; 4] = ["up", "down", "left", "right"];
const ACTIONS: [&str; 4] = ["[up]", "[down]", "[left]", "[right]"];
const MAX_RAMBLE: usize = 24;

/// Sparse next-token distribution.
pub type Target = Vec<(TokenId, f64)>;

/// Relative preference for each of [`Direction::ALL`] given the rules in
/// force. `map.player_start` is the current position.
pub fn direction_weights(map: &GridMap, facets: &[Facet]) -> [f64; 4] {
    let has = |f| facets.contains(&f);
    let player = map.player_start;
    let goal = map.positions_of(Cell::Goal).first().copied();
    let dist = |p: crate::textgames::Pos, g: crate::textgames::Pos| p.row.abs_diff(g.row) + p.col.abs_diff(g.col);
    let mut w = [1.0; 4];
    for (i, dir) in Direction::ALL.into_iter().enumerate() {
        let next = player.offset(dir, map.height, map.width);
        let cell = next.map(|p| map.cell(p));
        match map.game {
            Game::FrozenLake => {
                if next.is_none() && has(Facet::Edge) {
                    w[i] *= 0.05;
                }
                if cell == Some(Cell::Hole) && has(Facet::Hole) {
                    w[i] *= 0.05;
                }
                if let (Some(g), true) = (goal, has(Facet::Goal)) {
                    if dist(next.unwrap_or(player), g) >= dist(player, g) {
                        w[i] *= 0.1;
                    }
                }
            }
            Game::Sokoban => {
                if matches!(cell, None | Some(Cell::Wall)) && has(Facet::Wall) {
                    w[i] *= 0.05;
                }
            }
        }
    }
    w
}

/// The hand-written behaviour the base model imitates.
#[derive(Debug, Clone)]
pub struct ReferencePolicy {
    game: Game,
    facets: Vec<Facet>,
    wrapped: bool,
    vocab: Arc<Vocab>,
}

impl ReferencePolicy {
    pub fn new(game: Game, facets: Vec<Facet>, wrapped: bool) -> Self {
        ReferencePolicy { game, facets, wrapped, vocab: Vocab::standard() }
    }

    fn id(&self, token: &str) -> TokenId {
        self.vocab.id(token).unwrap_or_else(|| panic!("`{token}` missing from vocabulary"))
    }

    /// Distribution over the first reply token.
    pub fn first_token(&self, context: &str) -> Target {
        let invalid = if self.facets.contains(&Facet::Format) { 0.02 } else { 0.2 };
        let weights = match latest_state(self.game, context) {
            Some(map) => direction_weights(&map, &self.facets),
            None => [1.0; 4],
        };
        let total: f64 = weights.iter().sum();
        let mut out: Target = Vec::with_capacity(8);
        for (i, w) in weights.iter().enumerate() {
            out.push((self.id(ACTIONS[i]), (1.0 - invalid) * w / total));
        }
        for m in BARE_MOVES {
            out.push((self.id(m), invalid / 4.0));
        }
        out
    }

    /// Distribution over every later reply token.
    pub fn later_token(&self) -> Target {
        let stop = if self.wrapped { 0.5 } else { 0.15 };
        let mut out: Target = vec![(self.vocab.end_id(), stop)];
        let each = (1.0 - stop) / RATIONALE_WORDS.len() as f64;
        out.extend(RATIONALE_WORDS.iter().map(|w| (self.id(&format!(" {w}")), each)));
        out
    }
}

fn draw(rng: &mut ChaCha8Rng, dist: &Target) -> TokenId {
    let mut r = rng.random::<f64>() * dist.iter().map(|e| e.1).sum::<f64>();
    for &(t, p) in dist {
        r -= p;
        if r < 0.0 {
            return t;
        }
    }
    dist.last().expect("non-empty").0
}

impl Policy for ReferencePolicy {
    fn tag(&self) -> String {
        "reference".into()
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn sample_response(&self, context: &str, _t: f64, max_tokens: usize, seed: u64) -> Result<Response, PolicyError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens = vec![draw(&mut rng, &self.first_token(context))];
        let later = self.later_token();
        while tokens.len() < max_tokens.min(MAX_RAMBLE) {
            let t = draw(&mut rng, &later);
            tokens.push(t);
            if t == self.vocab.end_id() {
                break;
            }
        }
        Ok(Response::from_tokens(&self.vocab, tokens))
    }

    fn next_token_topk(&self, _c: &str, _k: usize) -> Result<TokenDistribution, PolicyError> {
        Err(PolicyError::Unsupported("next-token distributions from the reference policy"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub game: Game,
    pub toy: ToyConfig,
    pub steps: usize,
    /// Episodes (or suite items) per step.
    pub batch: usize,
    pub learning_rate: f64,
    pub ood_fraction: f64,
    /// Loss weight of the first reply token relative to later ones.
    pub action_weight: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            game: Game::FrozenLake,
            toy: ToyConfig::default(),
            steps: 1500,
            batch: 16,
            learning_rate: 3e-3,
            ood_fraction: 0.1,
            action_weight: 4.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// Stable digest naming the cached base model.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.update(Vocab::standard().hash().as_bytes());
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One training sequence with soft targets at some positions.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub tokens: Vec<TokenId>,
    /// `(context length, target, weight)`, ascending by position.
    pub targets: Vec<(usize, Target, f64)>,
}

fn relevant_facets(game: Game) -> &'static [Facet] {
    match game {
        Game::FrozenLake => &[Facet::Format, Facet::Hole, Facet::Edge, Facet::Goal, Facet::Step],
        Game::Sokoban => &[Facet::Format, Facet::Wall, Facet::Push, Facet::Blocked, Facet::Target, Facet::Step],
    }
}

/// A knowledge body shaped like an accumulation over several extractions.
pub fn sample_rule_knowledge(rng: &mut ChaCha8Rng, game: Game) -> (String, Vec<Facet>) {
    let available: Vec<Facet> = relevant_facets(game).iter().copied().filter(|_| rng.random_bool(0.6)).collect();
    let structured = rng.random_bool(0.5);
    let steps = rng.random_range(1..=15);
    let mut parts = Vec::new();
    let mut used = Vec::new();
    for _ in 0..steps {
        let mut chosen: Vec<Facet> = available.iter().copied().filter(|_| rng.random_bool(0.6)).collect();
        chosen.shuffle(rng);
        if chosen.is_empty() {
            continue;
        }
        let statements: Vec<String> = chosen
            .iter()
            .map(|f| {
                let s = f.statements()[rng.random_range(0..2)];
                if structured {
                    format!("{ITEM_MARKER} {s}")
                } else {
                    s.to_string()
                }
            })
            .collect();
        parts.push(statements.join(if structured { "\n" } else { " " }));
        used.extend(chosen);
    }
    used.sort();
    used.dedup();
    (parts.join("\n"), used)
}

fn reference_episode(
    rng: &mut ChaCha8Rng,
    game: Game,
    knowledge: Option<&str>,
    facets: Vec<Facet>,
) -> (crate::trajectory::Trajectory, ReferencePolicy) {
    let map = generate_map_in_split(game, rng.random(), MapSplit::Train).expect("generator succeeds");
    let policy = ReferencePolicy::new(game, facets, knowledge.is_some());
    let k = knowledge.map(|b| ExperientialKnowledge::new(KnowledgeFormat::Unstructured, b.to_string(), 0, 0));
    let episode = EpisodeConfig { max_turns: 5, max_response_tokens: MAX_RAMBLE, temperature: 1.0 };
    let t = collect_trajectory(&map, &policy, k.as_ref(), &episode, rng.random()).expect("reference never fails");
    (t, policy)
}

/// Training sequences from one reference episode, one per turn.
pub fn episode_sequences(seed: u64, game: Game, action_weight: f64) -> Vec<Sequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocab::standard();
    let kind: f64 = rng.random();
    let (body, facets) = if kind < 0.45 {
        (None, Vec::new())
    } else if kind < 0.85 {
        let (b, f) = sample_rule_knowledge(&mut rng, game);
        (Some(b), f)
    } else {
        let n = rng.random_range(1..=4);
        let raw: Vec<_> = (0..n).map(|_| reference_episode(&mut rng, game, None, Vec::new()).0).collect();
        let k = crate::knowledge::raw_trajectory_knowledge(&raw, 2048, 0);
        (Some(k.body), Vec::new())
    };
    let (traj, policy) = reference_episode(&mut rng, game, body.as_deref(), facets);
    let later = policy.later_token();
    let mut out = Vec::with_capacity(traj.turns.len());
    for j in 0..traj.turns.len() {
        let context = turn_chat(&traj.turns[..j], &traj.turns[j].feedback, body.as_deref()).generation_prompt();
        let mut tokens = vocab.encode(&context);
        let m = tokens.len();
        let reply = vocab.encode(&traj.turns[j].response);
        let mut targets = vec![(m, policy.first_token(&context), action_weight)];
        for i in 1..=reply.len() {
            targets.push((m + i, later.clone(), 1.0));
        }
        tokens.extend(reply);
        tokens.push(vocab.end_id());
        out.push(Sequence { tokens, targets });
    }
    out
}

/// A suite item as a one-hot sequence.
pub fn suite_sequence(index: usize) -> Sequence {
    let vocab = Vocab::standard();
    let (prompt, answer) = OOD_SUITE[index % OOD_SUITE.len()];
    let mut tokens = vocab.encode(&Chat::single_user(prompt).generation_prompt());
    let m = tokens.len();
    let mut reply = vocab.encode(answer);
    reply.push(vocab.end_id());
    let targets = reply.iter().enumerate().map(|(i, &t)| (m + i, vec![(t, 1.0)], 1.0)).collect();
    tokens.extend(reply);
    Sequence { tokens, targets }
}

/// Weighted soft cross-entropy (as KL to the target) and its gradient,
/// summed over target positions. Returns the loss and the total weight.
pub fn sequence_grad(model: &ToyModel, seq: &Sequence, grad: &mut [f64]) -> (f64, f64) {
    let first = seq.targets.first().expect("targets").0;
    let last = seq.targets.last().expect("targets").0;
    let fwd = model.forward(&seq.tokens, first..last + 1);
    let v = model.layout().v;
    let mut dlogits = vec![0.0; fwd.logits.len()];
    let mut loss = 0.0;
    let mut weight = 0.0;
    for (c, target, wt) in &seq.targets {
        let i = c - first;
        let lp = super::log_softmax(fwd.logits_at(i));
        let row = &mut dlogits[i * v..(i + 1) * v];
        for (r, l) in row.iter_mut().zip(&lp) {
            *r = wt * l.exp();
        }
        for &(t, p) in target {
            row[t as usize] -= wt * p;
            if p > 0.0 {
                loss += wt * p * (p.ln() - lp[t as usize]);
            }
        }
        weight += wt;
    }
    model.backward(&seq.tokens, &fwd, &dlogits, grad);
    (loss, weight)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Trains a base model from scratch. `progress` sees `(step, mean loss)`.
pub fn pretrain(config: &PretrainConfig, mut progress: impl FnMut(usize, f64)) -> ToyModel {
    let vocab = Vocab::standard();
    let mut model = ToyModel::random(vocab, config.toy, mix_seed(config.seed, 1), 0.1);
    let mut adam = Adam::new(model.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 2));
    for step in 0..config.steps {
        let jobs: Vec<(bool, u64)> =
            (0..config.batch).map(|_| (rng.random_bool(config.ood_fraction), rng.random())).collect();
        let seqs: Vec<Sequence> = par_map(&jobs, |&(ood, seed)| {
            if ood {
                vec![suite_sequence(seed as usize)]
            } else {
                episode_sequences(seed, config.game, config.action_weight)
            }
        })
        .into_iter()
        .flatten()
        .collect();
        let n = model.num_params();
        let parts = par_map(&seqs, |s| {
            let mut g = vec![0.0; n];
            let (loss, count) = sequence_grad(&model, s, &mut g);
            (g, loss, count)
        });
        let mut grad = vec![0.0; n];
        let (mut loss, mut count) = (0.0, 0.0);
        for (g, l, c) in parts {
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            loss += l;
            count += c;
        }
        let scale = 1.0 / f64::max(count, 1.0);
        grad.iter_mut().for_each(|g| *g *= scale);
        adam.step(model.params_mut(), &grad, config.learning_rate);
        progress(step, loss * scale);
    }
    model
}

pub fn cache_path(dir: &Path, config: &PretrainConfig) -> PathBuf {
    dir.join(format!("base-{}-{}.ckpt", config.game, config.digest()))
}

/// Loads the base model for `config` from `dir`, training and caching it
/// first if needed.
pub fn load_or_pretrain(config: &PretrainConfig, dir: &Path) -> Result<ToyModel, PolicyError> {
    let path = cache_path(dir, config);
    if path.exists() {
        if let Ok(m) = ToyModel::load(&path, Vocab::standard()) {
            return Ok(m);
        }
    }
    let model = pretrain(config, |step, loss| {
        if step % 100 == 0 {
            tracing::info!(step, loss, "pretraining base model");
        }
    });
    std::fs::create_dir_all(dir)?;
    model.save(&path)?;
    Ok(model)
}

/// Reads the rule facets named in a knowledge body.
pub fn facets_stated(body: &str) -> Vec<Facet> {
    Facet::ALL.into_iter().filter(|f| f.statements().iter().any(|s| body.contains(s))).collect()
}
