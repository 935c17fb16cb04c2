//! Browser bindings for three small interactions: playing a generated map,
//! comparing top-k truncated KL against the full value, and watching the
//! scripted extractor accumulate knowledge under a token cap.

use oel::distill::token_reverse_kl;
use oel::knowledge::scripted::ScriptedExtractor;
use oel::knowledge::{accumulate_steps, ExtractionConfig, KnowledgeFormat};
use oel::policy::scripted::UniformRandomPolicy;
use oel::policy::{log_softmax, Source, TokenDistribution};
use oel::textgames::{generate_map, parse_action, Game, GameState, Status};
use oel::trajectory::{collect_trajectory, EpisodeConfig};
use oel::util::mix_seed;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn game_of(name: &str) -> Result<Game, JsError> {
    name.parse().map_err(|e: String| JsError::new(&e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable")
}

/// One episode on a generated map.
#[wasm_bindgen]
pub struct Episode {
    state: GameState,
    log: Vec<String>,
}

#[wasm_bindgen]
impl Episode {
    #[wasm_bindgen(constructor)]
    pub fn new(game: &str, seed: u32, max_turns: usize) -> Result<Episode, JsError> {
        let map = generate_map(game_of(game)?, seed.into()).map_err(|e| JsError::new(&e.to_string()))?;
        let prompt = oel::textgames::initial_prompt(&map);
        Ok(Episode { state: GameState::new(map, max_turns), log: vec![prompt] })
    }

    /// Applies a reply such as `"[left]"` and returns the feedback text.
    /// Replies without a bracketed action consume a turn.
    pub fn step(&mut self, reply: &str) -> Result<String, JsError> {
        let result = match parse_action(reply) {
            Ok(action) => self.state.step(action),
            Err(_) => self.state.step_invalid(),
        };
        let (next, feedback) = result.map_err(|e| JsError::new(&e.to_string()))?;
        self.state = next;
        self.log.push(format!("> {reply}"));
        self.log.push(feedback.clone());
        Ok(feedback)
    }

    pub fn status(&self) -> String {
        format!("{:?}", self.state.status).to_lowercase()
    }

    pub fn running(&self) -> bool {
        self.state.status == Status::Running
    }

    pub fn turns_left(&self) -> usize {
        self.state.max_turns - self.state.turn_index
    }

    pub fn transcript(&self) -> String {
        self.log.join("\n\n")
    }
}

#[derive(Serialize)]
struct KlRow {
    k: usize,
    kl: f64,
    mass: f64,
}

/// Truncated reverse KL for every k from 1 to |V| given two logit vectors
/// (comma or space separated). Returns JSON rows `{k, kl, mass}` where
/// `mass` is the student probability covered by the top-k set.
#[wasm_bindgen]
pub fn kl_sweep(student_logits: &str, teacher_logits: &str) -> Result<String, JsError> {
    let parse = |s: &str| -> Result<Vec<f64>, JsError> {
        s.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|x| !x.is_empty())
            .map(|x| x.parse::<f64>().map_err(|_| JsError::new(&format!("not a number: {x}"))))
            .collect()
    };
    let (zs, zt) = (parse(student_logits)?, parse(teacher_logits)?);
    if zs.is_empty() || zs.len() != zt.len() {
        return Err(JsError::new("both vectors need the same, non-zero length"));
    }
    let (ls, lt) = (log_softmax(&zs), log_softmax(&zt));
    let rows = (1..=zs.len())
        .map(|k| {
            let s = TokenDistribution::top_k(&ls, k, Source::Student);
            let t = TokenDistribution {
                entries: s.entries.iter().map(|&(id, _)| (id, lt[id as usize])).collect(),
                source: Source::Teacher,
            };
            let kl = token_reverse_kl(&s, &t).expect("same token set");
            KlRow { k, kl, mass: s.entries.iter().map(|e| e.1.exp()).sum() }
        })
        .collect::<Vec<_>>();
    Ok(to_json(&rows))
}

#[derive(Serialize)]
struct Step {
    step: usize,
    outcome: String,
    tokens: usize,
    knowledge: String,
}

/// Plays `n` random-policy episodes and accumulates scripted knowledge
/// from them, capped at `l_max` tokens. Returns one JSON row per step.
#[wasm_bindgen]
pub fn accumulate_demo(game: &str, n: usize, l_max: usize, structured: bool, seed: u32) -> Result<String, JsError> {
    let game = game_of(game)?;
    let seed = u64::from(seed);
    let policy = UniformRandomPolicy::default();
    let episode = EpisodeConfig::default();
    let trajs = (0..n as u64)
        .map(|i| {
            let s = mix_seed(seed, i);
            let map = generate_map(game, s).map_err(|e| JsError::new(&e.to_string()))?;
            collect_trajectory(&map, &policy, None, &episode, s).map_err(|e| JsError::new(&e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let config = ExtractionConfig {
        format: if structured { KnowledgeFormat::Structured } else { KnowledgeFormat::Unstructured },
        n,
        l_max,
        k: 1,
        include_previous: true,
        ..ExtractionConfig::default()
    };
    let steps =
        accumulate_steps(&trajs, &ScriptedExtractor::new(), &config, seed).map_err(|e| JsError::new(&e.to_string()))?;
    let rows: Vec<Step> = steps
        .into_iter()
        .zip(&trajs)
        .map(|(e, t)| Step {
            step: e.accumulation_step,
            outcome: format!("{:?}", t.outcome).to_lowercase(),
            tokens: e.token_count,
            knowledge: e.body,
        })
        .collect();
    Ok(to_json(&rows))
}
