//! Consolidation: on-policy context distillation from a frozen teacher that
//! sees knowledge, into a student that does not.
//!
//! Per position the loss is the reverse KL restricted to the student's top-k
//! tokens, without renormalizing either side. Sampled tokens are treated as
//! constants, so only the student's log-probabilities carry gradient.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::{wrap_context, KnowledgeSet};
use crate::policy::{log_softmax, Policy, PolicyError, PolicyHandle, Source, TokenDistribution, TokenId, ToyModel};
use crate::trajectory::{prefix_generation_prompt, PrefixRecord};
use crate::util::{mix_seed, par_map};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("student and teacher distributions cover different tokens")]
    TokenSetMismatch,
    #[error("teacher must be frozen")]
    TeacherNotFrozen,
    #[error("no prefixes or no knowledge to distill from")]
    EmptyData,
    #[error("no response could be rolled out and scored in step {0}")]
    NoResponses(usize),
    #[error("invalid distillation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub steps: usize,
    pub games_per_step: usize,
    pub learning_rate: f64,
    pub topk: usize,
    pub temperature: f64,
    pub max_turns: usize,
    pub max_response_tokens: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 20,
            games_per_step: 64,
            learning_rate: 5e-6,
            topk: 256,
            temperature: 0.7,
            max_turns: 5,
            max_response_tokens: 1024,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |what: &str| Err(DistillError::InvalidConfig(format!("{what} must be positive")));
        if self.games_per_step == 0 {
            return bad("games_per_step");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate");
        }
        if self.topk == 0 {
            return bad("topk");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature");
        }
        if self.max_turns == 0 {
            return bad("max_turns");
        }
        if self.max_response_tokens == 0 {
            return bad("max_response_tokens");
        }
        Ok(())
    }

    /// Trajectories consumed by a full consolidation run.
    pub fn trajectories_needed(&self) -> usize {
        self.steps * self.games_per_step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KLStats {
    pub step: usize,
    /// Mean over responses of the per-token KL averaged within a response.
    pub mean_kl: f64,
    pub tokens: usize,
    pub mean_resp_len: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OnPolicy,
    OffPolicy,
}

/// Σ over the student's top-k tokens of p·(ln p − ln q). The teacher must
/// cover exactly the same tokens; neither side is renormalized.
pub fn token_reverse_kl(student: &TokenDistribution, teacher: &TokenDistribution) -> Result<f64, DistillError> {
    let q = aligned_teacher(student, teacher)?;
    Ok(student.entries.iter().zip(&q).map(|(&(_, lp), &lq)| lp.exp() * (lp - lq)).sum())
}

/// Teacher log-probs in the student's token order.
fn aligned_teacher(student: &TokenDistribution, teacher: &TokenDistribution) -> Result<Vec<f64>, DistillError> {
    if student.k() != teacher.k() {
        return Err(DistillError::TokenSetMismatch);
    }
    if student.entries.iter().zip(&teacher.entries).all(|(a, b)| a.0 == b.0) {
        return Ok(teacher.entries.iter().map(|e| e.1).collect());
    }
    let mut sorted = teacher.entries.clone();
    sorted.sort_by_key(|e| e.0);
    student
        .entries
        .iter()
        .map(|&(t, _)| {
            sorted.binary_search_by_key(&t, |e| e.0).map(|i| sorted[i].1).map_err(|_| DistillError::TokenSetMismatch)
        })
        .collect()
}

/// `∂/∂z` of the truncated reverse KL at one position, written into `out`,
/// given the student's full log-probs and the teacher's log-probs on the
/// student's top-k set. Returns the KL value.
pub fn reverse_kl_logit_grad(student_lp: &[f64], top: &[TokenId], teacher_lp: &[f64], out: &mut [f64]) -> f64 {
    let mut kl = 0.0;
    let mut mass = 0.0;
    for (&t, &lq) in top.iter().zip(teacher_lp) {
        let lp = student_lp[t as usize];
        let p = lp.exp();
        kl += p * (lp - lq);
        mass += p;
    }
    let shift = kl + mass;
    for (o, &lp) in out.iter_mut().zip(student_lp) {
        *o = -lp.exp() * shift;
    }
    for (&t, &lq) in top.iter().zip(teacher_lp) {
        let lp = student_lp[t as usize];
        out[t as usize] += lp.exp() * (lp - lq + 1.0);
    }
    kl
}

/// `∂/∂z` of the student's cross-entropy against the teacher's top-k
/// probabilities, written into `out`. Returns the forward KL on that set.
pub fn forward_kl_logit_grad(student_lp: &[f64], teacher: &TokenDistribution, out: &mut [f64]) -> f64 {
    let mut kl = 0.0;
    let mut mass = 0.0;
    for &(t, lq) in &teacher.entries {
        let q = lq.exp();
        kl += q * (lq - student_lp[t as usize]);
        mass += q;
    }
    for (o, &lp) in out.iter_mut().zip(student_lp) {
        *o = lp.exp() * mass;
    }
    for &(t, lq) in &teacher.entries {
        out[t as usize] -= lq.exp();
    }
    kl
}

/// One sampled response with the two contexts it is scored under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rollout {
    /// Tokenized prompt the student sees (no knowledge).
    pub student_context: Vec<TokenId>,
    /// Rendered prompt the teacher sees (knowledge wrapped in).
    pub teacher_context: String,
    pub response: Vec<TokenId>,
}

/// Batch loss (mean over responses of the per-token mean) and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub loss: f64,
    pub tokens: usize,
    pub responses: usize,
    pub grad: Vec<f64>,
}

struct Scored {
    tokens: Vec<TokenId>,
    start: usize,
    dlogits: Vec<f64>,
    kl: f64,
    len: usize,
}

/// On-policy objective for fixed responses: reverse KL over the student's
/// top-`k` at every response position.
pub fn onpolicy_objective(
    model: &ToyModel,
    teacher: &dyn Policy,
    rollouts: &[Rollout],
    k: usize,
) -> Result<Objective, DistillError> {
    objective(model, rollouts, |r, lps| {
        let tops: Vec<Vec<TokenId>> =
            lps.iter().map(|lp| TokenDistribution::top_k(lp, k, Source::Student).tokens()).collect();
        let q = teacher.score_sets(&r.teacher_context, &r.response, &tops)?;
        Ok(Box::new(move |i: usize, lp: &[f64], out: &mut [f64]| reverse_kl_logit_grad(lp, &tops[i], &q[i], out)))
    })
}

/// Off-policy objective: the student's cross-entropy on the teacher's top-`k`
/// along teacher-sampled responses, reported as forward KL.
pub fn offpolicy_objective(
    model: &ToyModel,
    teacher: &dyn Policy,
    rollouts: &[Rollout],
    k: usize,
) -> Result<Objective, DistillError> {
    objective(model, rollouts, |r, _| {
        let dists = teacher.topk_along(&r.teacher_context, &r.response, k)?;
        Ok(Box::new(move |i: usize, lp: &[f64], out: &mut [f64]| forward_kl_logit_grad(lp, &dists[i], out)))
    })
}

type PositionGrad = Box<dyn Fn(usize, &[f64], &mut [f64]) -> f64 + Send>;

fn objective(
    model: &ToyModel,
    rollouts: &[Rollout],
    prepare: impl Fn(&Rollout, &[Vec<f64>]) -> Result<PositionGrad, PolicyError> + Sync + Send,
) -> Result<Objective, DistillError> {
    let v = model.vocab().len();
    let scored = par_map(rollouts, |r| -> Result<Option<(Scored, _)>, PolicyError> {
        let n = r.response.len();
        if n == 0 {
            return Ok(None);
        }
        let m = r.student_context.len();
        let mut tokens = r.student_context.clone();
        tokens.extend_from_slice(&r.response);
        let fwd = model.forward(&tokens, m..m + n);
        let lps: Vec<Vec<f64>> = (0..n).map(|i| log_softmax(fwd.logits_at(i))).collect();
        let grad_at = prepare(r, &lps)?;
        let mut dlogits = vec![0.0; n * v];
        let mut kl = 0.0;
        for (i, lp) in lps.iter().enumerate() {
            kl += grad_at(i, lp, &mut dlogits[i * v..(i + 1) * v]);
        }
        let scale = 1.0 / n as f64;
        dlogits.iter_mut().for_each(|x| *x *= scale);
        Ok(Some((Scored { tokens, start: m, dlogits, kl: kl * scale, len: n }, fwd)))
    });
    let mut ok = Vec::with_capacity(scored.len());
    let mut first_err = None;
    for s in scored {
        match s {
            Ok(Some(x)) => ok.push(x),
            Ok(None) => {}
            Err(e) => {
                tracing::warn!("scoring a response failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    if ok.is_empty() {
        return Err(match first_err {
            Some(e) => DistillError::Policy(e),
            None => DistillError::NoResponses(0),
        });
    }
    let b = ok.len() as f64;
    let mut grad = vec![0.0; model.num_params()];
    let (mut loss, mut tokens) = (0.0, 0);
    for (s, fwd) in &ok {
        let dl: Vec<f64> = s.dlogits.iter().map(|x| x / b).collect();
        debug_assert_eq!(fwd.positions.start, s.start);
        model.backward(&s.tokens, fwd, &dl, &mut grad);
        loss += s.kl / b;
        tokens += s.len;
    }
    Ok(Objective { loss, tokens, responses: ok.len(), grad })
}

/// Prefixes grouped by source trajectory, in collection order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrefixDataset {
    pub groups: Vec<Vec<PrefixRecord>>,
}

impl PrefixDataset {
    /// Groups consecutive records that share a source trajectory.
    pub fn from_records(records: Vec<PrefixRecord>) -> Self {
        let mut groups: Vec<Vec<PrefixRecord>> = Vec::new();
        for r in records {
            match groups.last_mut() {
                Some(g) if g[0].source_trajectory_id == r.source_trajectory_id => g.push(r),
                _ => groups.push(vec![r]),
            }
        }
        PrefixDataset { groups }
    }

    pub fn num_trajectories(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Prefixes of the trajectories used at `step`: a window of
    /// `games_per_step` trajectories, wrapping around when the data runs out.
    pub fn batch(&self, step: usize, games_per_step: usize) -> Vec<&PrefixRecord> {
        if self.groups.is_empty() {
            return Vec::new();
        }
        (0..games_per_step).flat_map(|g| &self.groups[(step * games_per_step + g) % self.groups.len()]).collect()
    }
}

fn check(teacher: &PolicyHandle, batch: &[&PrefixRecord], knowledge: &KnowledgeSet) -> Result<(), DistillError> {
    if !teacher.is_frozen() {
        return Err(DistillError::TeacherNotFrozen);
    }
    if batch.is_empty() || knowledge.entries.is_empty() {
        return Err(DistillError::EmptyData);
    }
    Ok(())
}

/// Knowledge entry and sampling seed for batch element `i`.
fn draw(knowledge: &KnowledgeSet, seed: u64, i: usize) -> (&str, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
    let e = &knowledge.entries[rng.random_range(0..knowledge.entries.len())];
    (e.body.as_str(), rng.random())
}

fn stats(step: usize, obj: &Objective) -> KLStats {
    KLStats {
        step,
        mean_kl: obj.loss,
        tokens: obj.tokens,
        mean_resp_len: obj.tokens as f64 / obj.responses.max(1) as f64,
    }
}

/// One on-policy update: the student answers each prefix without knowledge,
/// the teacher scores the same tokens with a random knowledge entry.
pub fn distill_step(
    student: &mut PolicyHandle,
    teacher: &PolicyHandle,
    batch: &[&PrefixRecord],
    knowledge: &KnowledgeSet,
    config: &DistillConfig,
    step: usize,
    seed: u64,
) -> Result<KLStats, DistillError> {
    check(teacher, batch, knowledge)?;
    let model = student.toy_model_mut()?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    let rollouts = par_map(&idx, |&i| {
        let p = batch[i];
        let (body, s) = draw(knowledge, seed, i);
        let prompt = prefix_generation_prompt(&p.prefix_text);
        let student_context = model.vocab().encode(&prompt);
        let response = model.generate(&student_context, config.temperature, config.max_response_tokens, s);
        Rollout {
            student_context,
            teacher_context: prefix_generation_prompt(&wrap_context(&p.prefix_text, body)),
            response,
        }
    });
    let obj = onpolicy_objective(model, teacher, &rollouts, config.topk).map_err(|e| match e {
        DistillError::NoResponses(_) => DistillError::NoResponses(step),
        e => e,
    })?;
    model.sgd_update(&obj.grad, config.learning_rate);
    Ok(stats(step, &obj))
}

/// One off-policy update: the teacher answers with knowledge, the student
/// fits the teacher's top-k distribution along that answer without it.
pub fn offpolicy_cd_step(
    student: &mut PolicyHandle,
    teacher: &PolicyHandle,
    batch: &[&PrefixRecord],
    knowledge: &KnowledgeSet,
    config: &DistillConfig,
    step: usize,
    seed: u64,
) -> Result<KLStats, DistillError> {
    check(teacher, batch, knowledge)?;
    let model = student.toy_model_mut()?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    let sampled = par_map(&idx, |&i| -> Result<Rollout, PolicyError> {
        let p = batch[i];
        let (body, s) = draw(knowledge, seed, i);
        let teacher_context = prefix_generation_prompt(&wrap_context(&p.prefix_text, body));
        let reply = teacher.sample_response(&teacher_context, config.temperature, config.max_response_tokens, s)?;
        let student_context = model.vocab().encode(&prefix_generation_prompt(&p.prefix_text));
        Ok(Rollout { student_context, teacher_context, response: reply.tokens })
    });
    let mut rollouts = Vec::with_capacity(sampled.len());
    for r in sampled {
        match r {
            Ok(r) => rollouts.push(r),
            Err(e) => tracing::warn!("teacher rollout failed: {e}"),
        }
    }
    if rollouts.is_empty() {
        return Err(DistillError::NoResponses(step));
    }
    let obj = offpolicy_objective(model, teacher, &rollouts, config.topk).map_err(|e| match e {
        DistillError::NoResponses(_) => DistillError::NoResponses(step),
        e => e,
    })?;
    model.sgd_update(&obj.grad, config.learning_rate);
    Ok(stats(step, &obj))
}

/// Runs `config.steps` updates on a copy of `student` and returns the
/// final-step model with per-step statistics. `on_step` sees each step's
/// statistics as they are produced.
#[allow(clippy::too_many_arguments)]
pub fn train_consolidation(
    student: &PolicyHandle,
    teacher: &PolicyHandle,
    data: &PrefixDataset,
    knowledge: &KnowledgeSet,
    config: &DistillConfig,
    mode: Mode,
    seed: u64,
    mut on_step: impl FnMut(&KLStats),
) -> Result<(PolicyHandle, Vec<KLStats>), DistillError> {
    config.validate()?;
    let mut out = student.clone();
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = data.batch(step, config.games_per_step);
        let s = mix_seed(seed, step as u64);
        let st = match mode {
            Mode::OnPolicy => distill_step(&mut out, teacher, &batch, knowledge, config, step, s)?,
            Mode::OffPolicy => offpolicy_cd_step(&mut out, teacher, &batch, knowledge, config, step, s)?,
        };
        tracing::info!(step, mean_kl = st.mean_kl, tokens = st.tokens, "consolidation step");
        on_step(&st);
        history.push(st);
    }
    Ok((out, history))
}

pub const KL_CSV_HEADER: &str = "step,mean_kl,tokens,mean_resp_len";

pub fn write_kl_csv(path: &Path, stats: &[KLStats]) -> Result<(), DistillError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{KL_CSV_HEADER}")?;
    for s in stats {
        writeln!(f, "{},{},{},{}", s.step, s.mean_kl, s.tokens, s.mean_resp_len)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_kl_csv(path: &Path) -> Result<Vec<KLStats>, DistillError> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("bad KL row `{line}`"));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(l).into());
            }
            Ok(KLStats {
                step: f[0].parse().map_err(|_| bad(l))?,
                mean_kl: f[1].parse().map_err(|_| bad(l))?,
                tokens: f[2].parse().map_err(|_| bad(l))?,
                mean_resp_len: f[3].parse().map_err(|_| bad(l))?,
            })
        })
        .collect()
}
