//! Sequence-model policies: the trainable toy backend, a remote
//! chat-completions backend, and scripted test doubles.

pub mod pretrain;
#[cfg(feature = "remote")]
pub mod remote;
pub mod scripted;
pub mod toy;
pub mod vocab;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use toy::{ToyConfig, ToyModel};
pub use vocab::{TokenId, Vocab};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("remote endpoint unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("requested top-{k} but the endpoint returns at most {max} log-probs")]
    KTooLarge { k: usize, max: usize },
    #[error("parameter update on a frozen policy")]
    FrozenPolicy,
    #[error("{0} is not supported by this backend")]
    Unsupported(&'static str),
    #[error("endpoint did not report log-probs for token `{0}`")]
    MissingLogprob(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Student,
    Teacher,
}

/// Top-k next-token log-probabilities, highest first. Not renormalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    pub entries: Vec<(TokenId, f64)>,
    pub source: Source,
}

impl TokenDistribution {
    /// Keeps the `k` most likely tokens of a full log-probability vector.
    /// Ties break toward the lower token id.
    pub fn top_k(logprobs: &[f64], k: usize, source: Source) -> Self {
        let k = k.clamp(1, logprobs.len());
        let mut idx: Vec<u32> = (0..logprobs.len() as u32).collect();
        let cmp = |a: &u32, b: &u32| logprobs[*b as usize].total_cmp(&logprobs[*a as usize]).then(a.cmp(b));
        if k < idx.len() {
            idx.select_nth_unstable_by(k - 1, cmp);
            idx.truncate(k);
        }
        idx.sort_by(cmp);
        TokenDistribution { entries: idx.into_iter().map(|i| (i, logprobs[i as usize])).collect(), source }
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.entries.iter().map(|e| e.0).collect()
    }
}

/// One sampled reply. `tokens` includes the end marker when the policy
/// produced one; `text` never does.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub tokens: Vec<TokenId>,
    pub text: String,
}

impl Response {
    pub fn from_tokens(vocab: &Vocab, tokens: Vec<TokenId>) -> Self {
        let end = vocab.end_id();
        let body = match tokens.last() {
            Some(&t) if t == end => &tokens[..tokens.len() - 1],
            _ => &tokens[..],
        };
        Response { text: vocab.decode(body), tokens }
    }

    /// Tokenizes fixed text and terminates it, as a scripted reply.
    pub fn from_text(vocab: &Vocab, text: &str) -> Self {
        let mut tokens = vocab.encode(text);
        tokens.push(vocab.end_id());
        Response { tokens, text: text.to_string() }
    }
}

/// Anything that can act as student, teacher or extractor.
pub trait Policy: Send + Sync {
    /// Identifies the producing model in trajectory records.
    fn tag(&self) -> String;

    fn vocab(&self) -> &Vocab;

    fn sample_response(
        &self,
        context: &str,
        temperature: f64,
        max_tokens: usize,
        seed: u64,
    ) -> Result<Response, PolicyError>;

    fn next_token_topk(&self, context: &str, k: usize) -> Result<TokenDistribution, PolicyError>;

    /// Top-k distributions at each position of `continuation` appended to
    /// the tokenized `context`; entry `t` conditions on `continuation[..t]`.
    fn topk_along(
        &self,
        _context: &str,
        _continuation: &[TokenId],
        _k: usize,
    ) -> Result<Vec<TokenDistribution>, PolicyError> {
        Err(PolicyError::Unsupported("scoring a continuation"))
    }

    /// Log-probabilities of `sets[t]` at position `t` of `continuation`.
    fn score_sets(
        &self,
        _context: &str,
        _continuation: &[TokenId],
        _sets: &[Vec<TokenId>],
    ) -> Result<Vec<Vec<f64>>, PolicyError> {
        Err(PolicyError::Unsupported("scoring a continuation"))
    }
}

#[derive(Debug, Clone)]
pub enum Backend {
    Toy(ToyModel),
    #[cfg(feature = "remote")]
    Remote(remote::RemoteClient),
}

/// A policy backend plus the frozen flag that guards teachers.
#[derive(Debug, Clone)]
pub struct PolicyHandle {
    backend: Backend,
    frozen: bool,
    tag: String,
}

impl PolicyHandle {
    pub fn toy(model: ToyModel, tag: impl Into<String>) -> Self {
        PolicyHandle { backend: Backend::Toy(model), frozen: false, tag: tag.into() }
    }

    #[cfg(feature = "remote")]
    pub fn remote(client: remote::RemoteClient) -> Self {
        let tag = format!("remote:{}", client.config().model);
        PolicyHandle { backend: Backend::Remote(client), frozen: true, tag }
    }

    /// Loads a toy checkpoint; the tag is the checkpoint path.
    pub fn load_toy(path: &Path) -> Result<Self, PolicyError> {
        let model = ToyModel::load(path, Vocab::standard())?;
        Ok(PolicyHandle::toy(model, path.display().to_string()))
    }

    /// A copy that rejects parameter updates.
    pub fn frozen_copy(&self) -> Self {
        PolicyHandle { frozen: true, ..self.clone() }
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_tag(&mut self, tag: impl Into<String>) {
        self.tag = tag.into();
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn toy_model(&self) -> Option<&ToyModel> {
        match &self.backend {
            Backend::Toy(m) => Some(m),
            #[cfg(feature = "remote")]
            Backend::Remote(_) => None,
        }
    }

    /// Mutable parameters for training; frozen or remote handles refuse.
    pub fn toy_model_mut(&mut self) -> Result<&mut ToyModel, PolicyError> {
        if self.frozen {
            return Err(PolicyError::FrozenPolicy);
        }
        match &mut self.backend {
            Backend::Toy(m) => Ok(m),
            #[cfg(feature = "remote")]
            Backend::Remote(_) => Err(PolicyError::Unsupported("training a remote model")),
        }
    }

    fn inner(&self) -> &dyn Policy {
        match &self.backend {
            Backend::Toy(m) => m,
            #[cfg(feature = "remote")]
            Backend::Remote(r) => r,
        }
    }
}

impl Policy for PolicyHandle {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn vocab(&self) -> &Vocab {
        self.inner().vocab()
    }

    fn sample_response(
        &self,
        context: &str,
        temperature: f64,
        max_tokens: usize,
        seed: u64,
    ) -> Result<Response, PolicyError> {
        self.inner().sample_response(context, temperature, max_tokens, seed)
    }

    fn next_token_topk(&self, context: &str, k: usize) -> Result<TokenDistribution, PolicyError> {
        self.inner().next_token_topk(context, k)
    }

    fn topk_along(
        &self,
        context: &str,
        continuation: &[TokenId],
        k: usize,
    ) -> Result<Vec<TokenDistribution>, PolicyError> {
        self.inner().topk_along(context, continuation, k)
    }

    fn score_sets(
        &self,
        context: &str,
        continuation: &[TokenId],
        sets: &[Vec<TokenId>],
    ) -> Result<Vec<Vec<f64>>, PolicyError> {
        self.inner().score_sets(context, continuation, sets)
    }
}

impl<P: Policy + ?Sized> Policy for Arc<P> {
    fn tag(&self) -> String {
        (**self).tag()
    }

    fn vocab(&self) -> &Vocab {
        (**self).vocab()
    }

    fn sample_response(
        &self,
        context: &str,
        temperature: f64,
        max_tokens: usize,
        seed: u64,
    ) -> Result<Response, PolicyError> {
        (**self).sample_response(context, temperature, max_tokens, seed)
    }

    fn next_token_topk(&self, context: &str, k: usize) -> Result<TokenDistribution, PolicyError> {
        (**self).next_token_topk(context, k)
    }

    fn topk_along(
        &self,
        context: &str,
        continuation: &[TokenId],
        k: usize,
    ) -> Result<Vec<TokenDistribution>, PolicyError> {
        (**self).topk_along(context, continuation, k)
    }

    fn score_sets(
        &self,
        context: &str,
        continuation: &[TokenId],
        sets: &[Vec<TokenId>],
    ) -> Result<Vec<Vec<f64>>, PolicyError> {
        (**self).score_sets(context, continuation, sets)
    }
}

/// Log-softmax of `logits`, computed in a numerically stable way.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|&z| z - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_orders_and_clips() {
        let lp = log_softmax(&[0.0, 2.0, 1.0, 2.0]);
        let d = TokenDistribution::top_k(&lp, 3, Source::Student);
        assert_eq!(d.tokens(), vec![1, 3, 2]);
        let all = TokenDistribution::top_k(&lp, 256, Source::Student);
        assert_eq!(all.k(), 4);
        let total: f64 = all.entries.iter().map(|e| e.1.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
