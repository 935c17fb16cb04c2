//! Scripted stand-ins for an extractor.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use oel::policy::scripted::UniformRandomPolicy;
use oel::policy::{Policy, PolicyError, Response, TokenDistribution, Vocab};
use oel::textgames::{generate_map, Game};
use oel::trajectory::{collect_trajectory, EpisodeConfig, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform-random FrozenLake episodes on generated maps `0..n`.
pub fn trajectories(n: usize) -> Vec<Trajectory> {
    (0..n as u64)
        .map(|i| {
            let map = generate_map(Game::FrozenLake, i).unwrap();
            collect_trajectory(&map, &UniformRandomPolicy::default(), None, &EpisodeConfig::default(), i).unwrap()
        })
        .collect()
}

/// Replies with the next string from a list on each call.
pub struct Sequence {
    replies: Vec<String>,
    calls: AtomicUsize,
    vocab: Arc<Vocab>,
}

impl Sequence {
    pub fn new(replies: Vec<String>) -> Self {
        Sequence { replies, calls: AtomicUsize::new(0), vocab: Vocab::standard() }
    }
}

impl Policy for Sequence {
    fn tag(&self) -> String {
        "sequence".into()
    }
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }
    fn sample_response(&self, _: &str, _: f64, _: usize, _: u64) -> Result<Response, PolicyError> {
        let i = self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(Response::from_text(&self.vocab, &self.replies[i % self.replies.len()]))
    }
    fn next_token_topk(&self, _: &str, _: usize) -> Result<TokenDistribution, PolicyError> {
        Err(PolicyError::Unsupported("scoring"))
    }
}

/// Letters whose count and content depend only on the sampling seed.
pub struct SeededLetters {
    pub max_len: usize,
    pub vocab: Arc<Vocab>,
}

impl Policy for SeededLetters {
    fn tag(&self) -> String {
        "letters".into()
    }
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }
    fn sample_response(&self, _: &str, _: f64, _: usize, seed: u64) -> Result<Response, PolicyError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = rng.random_range(0..=self.max_len);
        let text: String = (0..len).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect();
        Ok(Response::from_text(&self.vocab, &text))
    }
    fn next_token_topk(&self, _: &str, _: usize) -> Result<TokenDistribution, PolicyError> {
        Err(PolicyError::Unsupported("scoring"))
    }
}
