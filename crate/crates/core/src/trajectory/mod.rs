//! Multi-turn rollouts, their partial-rollout prefixes, and NDJSON storage.

mod store;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chat::{strip_thinking, Chat, Message, THINK_CLOSE, THINK_OPEN};
use crate::knowledge::{wrap_solving, ExperientialKnowledge};
use crate::policy::{Policy, PolicyError};
use crate::textgames::{parse_action, Direction, Game, GameState, GridMap, Status};
use crate::util::{mix_seed, par_map};

pub use store::{load_all, store_append, write_all, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    /// Environment output shown before the response (the initial prompt on
    /// turn 1). Never includes knowledge.
    pub feedback: String,
    /// Raw policy output, thinking included.
    pub response: String,
    pub response_token_count: usize,
    pub action: Option<Direction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Won,
    Lost,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub trajectory_id: String,
    pub map_id: String,
    pub game: Game,
    pub policy_tag: String,
    pub knowledge_id: Option<String>,
    pub turns: Vec<Turn>,
    pub outcome: Outcome,
    /// Environment output after the last response.
    pub final_feedback: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixRecord {
    pub source_trajectory_id: String,
    /// 1-based turn index.
    pub j: usize,
    pub prefix_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub max_turns: usize,
    pub max_response_tokens: usize,
    pub temperature: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { max_turns: 5, max_response_tokens: 1024, temperature: 0.7 }
    }
}

/// The chat a policy sees before responding at turn `turns.len() + 1`, given
/// earlier turns and the pending observation.
pub fn turn_chat(turns: &[Turn], pending: &str, knowledge: Option<&str>) -> Chat {
    let mut chat = Chat::default();
    let mut first = true;
    let mut user = |content: &str, chat: &mut Chat| {
        let content = match (first, knowledge) {
            (true, Some(body)) => wrap_solving(body, content),
            _ => content.to_string(),
        };
        first = false;
        chat.push(Message::user(content));
    };
    for t in turns {
        user(&t.feedback, &mut chat);
        chat.push(Message::assistant(t.response.clone()));
    }
    user(pending, &mut chat);
    chat
}

fn trajectory_id(tag: &str, map_id: &str, seed: u64, knowledge_id: Option<&str>) -> String {
    let mut h = Sha256::new();
    for part in [tag, map_id, &seed.to_string(), knowledge_id.unwrap_or("")] {
        h.update(part.as_bytes());
        h.update([0]);
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Plays one episode. Turn `j` samples with seed `mix_seed(seed, j)`.
pub fn collect_trajectory(
    map: &GridMap,
    policy: &dyn Policy,
    knowledge: Option<&ExperientialKnowledge>,
    episode: &EpisodeConfig,
    seed: u64,
) -> Result<Trajectory, PolicyError> {
    let mut state = GameState::new(map.clone(), episode.max_turns);
    let mut pending = crate::textgames::initial_prompt(map);
    let mut turns: Vec<Turn> = Vec::new();
    let body = knowledge.map(|k| k.body.as_str());
    while state.status == Status::Running {
        let context = turn_chat(&turns, &pending, body).generation_prompt();
        let reply = policy.sample_response(
            &context,
            episode.temperature,
            episode.max_response_tokens,
            mix_seed(seed, turns.len() as u64),
        )?;
        let action = parse_action(&strip_thinking(&reply.text, THINK_OPEN, THINK_CLOSE)).ok();
        let (next, feedback) = match action {
            Some(a) => state.step(a),
            None => state.step_invalid(),
        }
        .expect("state is running");
        turns.push(Turn {
            feedback: std::mem::replace(&mut pending, feedback),
            response: reply.text,
            response_token_count: reply.tokens.len(),
            action: action.map(|a| a.direction()),
        });
        state = next;
    }
    let outcome = match state.status {
        Status::Won => Outcome::Won,
        Status::Lost => Outcome::Lost,
        _ => Outcome::Exhausted,
    };
    let tag = policy.tag();
    let knowledge_id = knowledge.map(|k| k.knowledge_id.clone());
    Ok(Trajectory {
        trajectory_id: trajectory_id(&tag, &map.map_id, seed, knowledge_id.as_deref()),
        map_id: map.map_id.clone(),
        game: map.game,
        policy_tag: tag,
        knowledge_id,
        turns,
        outcome,
        final_feedback: pending,
    })
}

/// Collects one trajectory per `(map, seed)` job in parallel. A job whose
/// policy call fails is retried up to `retries` times with a fresh seed and
/// then discarded; the second value counts discarded jobs.
pub fn collect_many(
    jobs: &[(GridMap, u64)],
    policy: &dyn Policy,
    knowledge: Option<&ExperientialKnowledge>,
    episode: &EpisodeConfig,
    retries: usize,
) -> (Vec<Trajectory>, usize) {
    let results = par_map(jobs, |(map, seed)| {
        let mut last = None;
        for attempt in 0..=retries as u64 {
            let s = if attempt == 0 { *seed } else { mix_seed(*seed, 0x7e7_0000 + attempt) };
            match collect_trajectory(map, policy, knowledge, episode, s) {
                Ok(t) => return Ok(t),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    });
    let mut out = Vec::with_capacity(results.len());
    let mut failed = 0;
    for r in results {
        match r {
            Ok(t) => out.push(t),
            Err(e) => {
                tracing::warn!("discarding trajectory after policy failure: {e}");
                failed += 1;
            }
        }
    }
    (out, failed)
}

impl Trajectory {
    /// Full conversation, ending with the final environment output.
    pub fn chat(&self) -> Chat {
        turn_chat(&self.turns, &self.final_feedback, None)
    }

    /// Plain transcript used as the latest experience for extraction.
    pub fn transcript(&self) -> String {
        let mut parts = Vec::with_capacity(self.turns.len() * 2 + 1);
        for t in &self.turns {
            parts.push(format!("Environment:\n{}", t.feedback));
            parts.push(format!("Response:\n{}", t.response));
        }
        parts.push(format!("Environment:\n{}", self.final_feedback));
        parts.join("\n\n")
    }
}

/// Every partial rollout ending in an observation, one per turn.
pub fn extract_prefixes(t: &Trajectory) -> Vec<PrefixRecord> {
    (0..t.turns.len())
        .map(|j| PrefixRecord {
            source_trajectory_id: t.trajectory_id.clone(),
            j: j + 1,
            prefix_text: turn_chat(&t.turns[..j], &t.turns[j].feedback, None).render_open(),
        })
        .collect()
}

/// The prompt a policy continues from when responding to a prefix.
pub fn prefix_generation_prompt(prefix_text: &str) -> String {
    format!("{prefix_text}{}{}", crate::chat::END_MARKER, crate::chat::ASSISTANT_MARKER)
}
