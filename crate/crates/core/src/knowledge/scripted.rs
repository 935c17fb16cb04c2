//! Rule-based oracle extractor, a test double for model-based extraction.
//!
//! It reads the interaction history out of an extraction prompt, looks for
//! the fixed environment feedback sentences, and states the rule each one
//! reveals. It never sees anything but the prompt text.

use crate::policy::{Policy, PolicyError, Response, TokenDistribution, Vocab};
use crate::textgames::{
    FEEDBACK_BOX_BLOCKED, FEEDBACK_BOX_ON_TARGET, FEEDBACK_GOAL, FEEDBACK_HIT_WALL, FEEDBACK_HOLE,
    FEEDBACK_INVALID_FORMAT, FEEDBACK_OFF_GRID,
};
use crate::util::mix_seed;

use super::ITEM_MARKER;

/// A rule the extractor can state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Facet {
    Format,
    Hole,
    Edge,
    Goal,
    Step,
    Wall,
    Push,
    Blocked,
    Target,
}

impl Facet {
    pub const ALL: [Facet; 9] = [
        Facet::Format,
        Facet::Hole,
        Facet::Edge,
        Facet::Goal,
        Facet::Step,
        Facet::Wall,
        Facet::Push,
        Facet::Blocked,
        Facet::Target,
    ];

    /// Feedback fragment whose presence reveals this rule.
    pub fn trigger(self) -> &'static str {
        match self {
            Facet::Format => FEEDBACK_INVALID_FORMAT,
            Facet::Hole => FEEDBACK_HOLE,
            Facet::Edge => FEEDBACK_OFF_GRID,
            Facet::Goal => FEEDBACK_GOAL,
            Facet::Step => "You moved ",
            Facet::Wall => FEEDBACK_HIT_WALL,
            Facet::Push => "You pushed the box ",
            Facet::Blocked => FEEDBACK_BOX_BLOCKED,
            Facet::Target => FEEDBACK_BOX_ON_TARGET,
        }
    }

    /// Alternative phrasings; the extractor's seed picks one.
    pub fn statements(self) -> [&'static str; 2] {
        match self {
            Facet::Format => [
                "Always wrap the chosen action in square brackets, for example [down].",
                "Answers without square brackets are rejected, so write the move as [right] or [down].",
            ],
            Facet::Hole => [
                "Cells marked H are holes; stepping onto H ends the game, so never move onto H.",
                "Avoid every H: moving into a hole loses immediately.",
            ],
            Facet::Edge => [
                "Moves that would leave the grid are wasted; stay inside the board.",
                "Never move toward a border P already touches; the turn is wasted.",
            ],
            Facet::Goal => [
                "The goal G sits at the bottom right; each move should bring P closer to G, so prefer down and right.",
                "Head for G: moving down or right shortens the distance to the goal.",
            ],
            Facet::Step => [
                "Each action moves P exactly one cell in the named direction.",
                "P moves one cell per turn in the chosen direction.",
            ],
            Facet::Wall => [
                "Walls marked # block movement; moving into # wastes the turn.",
                "Never walk into #, the move is refused.",
            ],
            Facet::Push => [
                "Walking into the box X pushes it one cell in the same direction.",
                "P moves the box X by stepping into it.",
            ],
            Facet::Blocked => [
                "A box next to a wall cannot be pushed into it; push boxes away from walls.",
                "Pushing X into # fails, so plan pushes with free space behind the box.",
            ],
            Facet::Target => ["Pushing the box X onto the target O wins the game.", "The game is won once X covers O."],
        }
    }
}

/// Facets revealed by a piece of interaction history, in [`Facet::ALL`] order.
pub fn facets_in(history: &str) -> Vec<Facet> {
    Facet::ALL.into_iter().filter(|f| history.contains(f.trigger())).collect()
}

const HISTORY_START: &str = "(output)):\n";
const HISTORY_END: &str = "\n\nHere is the previous experience:\n# Experience\n";
const PREVIOUS_END: &str = "\n\nYour task:";

#[derive(Debug, Clone)]
pub struct ScriptedExtractor {
    vocab: std::sync::Arc<Vocab>,
}

impl Default for ScriptedExtractor {
    fn default() -> Self {
        ScriptedExtractor { vocab: Vocab::standard() }
    }
}

impl ScriptedExtractor {
    pub fn new() -> Self {
        Self::default()
    }

    /// The reply for one extraction prompt, deterministic in `seed`.
    pub fn respond(&self, prompt: &str, seed: u64) -> String {
        let (history, previous) = match prompt.split_once(HISTORY_START) {
            Some((_, rest)) => match rest.split_once(HISTORY_END) {
                Some((h, tail)) => (h, tail.split_once(PREVIOUS_END).map_or("", |p| p.0)),
                None => (rest, ""),
            },
            None => (prompt, ""),
        };
        let structured = prompt.contains("MUST be formatted strictly");
        let statements: Vec<&str> = facets_in(history)
            .into_iter()
            .map(|f| f.statements()[(mix_seed(seed, f as u64) % 2) as usize])
            .filter(|s| !previous.contains(s))
            .collect();
        if structured {
            let mut out = String::from("Additional Experience (Rules or Strategies):\n# Experience");
            for s in statements {
                out.push('\n');
                out.push_str(ITEM_MARKER);
                out.push(' ');
                out.push_str(s);
            }
            out
        } else {
            statements.join(" ")
        }
    }
}

impl Policy for ScriptedExtractor {
    fn tag(&self) -> String {
        "scripted-extractor".into()
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn sample_response(&self, context: &str, _t: f64, max_tokens: usize, seed: u64) -> Result<Response, PolicyError> {
        let text = self.respond(context, seed);
        let mut r = Response::from_text(&self.vocab, &text);
        if r.tokens.len() > max_tokens {
            r.tokens.truncate(max_tokens);
            r.text = self.vocab.decode(&r.tokens);
        }
        Ok(r)
    }

    fn next_token_topk(&self, _context: &str, _k: usize) -> Result<TokenDistribution, PolicyError> {
        Err(PolicyError::Unsupported("next-token distributions from a scripted extractor"))
    }
}

/// Every statement the extractor can emit.
pub fn all_statements() -> impl Iterator<Item = &'static str> {
    Facet::ALL.into_iter().flat_map(|f| f.statements())
}
