//! Scripted policies used as test doubles and evaluation baselines.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Policy, PolicyError, Response, TokenDistribution, Vocab};
use crate::chat::{Chat, Role};
use crate::textgames::{solve, Cell, Direction, Game, GridMap, Pos};

fn unsupported() -> PolicyError {
    PolicyError::Unsupported("next-token distributions from a scripted policy")
}

/// Replies with the same text every turn.
#[derive(Debug, Clone)]
pub struct ConstantPolicy {
    text: String,
    vocab: Arc<Vocab>,
}

impl ConstantPolicy {
    pub fn new(text: impl Into<String>) -> Self {
        ConstantPolicy { text: text.into(), vocab: Vocab::standard() }
    }

    /// Never produces a parseable action.
    pub fn no_bracket() -> Self {
        ConstantPolicy::new("I would go down next.")
    }
}

impl Policy for ConstantPolicy {
    fn tag(&self) -> String {
        format!("constant:{}", self.text)
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn sample_response(&self, _c: &str, _t: f64, max_tokens: usize, _s: u64) -> Result<Response, PolicyError> {
        let mut r = Response::from_text(&self.vocab, &self.text);
        r.tokens.truncate(max_tokens);
        Ok(r)
    }

    fn next_token_topk(&self, _c: &str, _k: usize) -> Result<TokenDistribution, PolicyError> {
        Err(unsupported())
    }
}

/// Uniformly random bracketed direction each turn.
#[derive(Debug, Clone)]
pub struct UniformRandomPolicy {
    vocab: Arc<Vocab>,
}

impl Default for UniformRandomPolicy {
    fn default() -> Self {
        UniformRandomPolicy { vocab: Vocab::standard() }
    }
}

impl Policy for UniformRandomPolicy {
    fn tag(&self) -> String {
        "uniform-random".into()
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn sample_response(&self, _c: &str, _t: f64, _m: usize, seed: u64) -> Result<Response, PolicyError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dir = Direction::ALL[rng.random_range(0..4)];
        Ok(Response::from_text(&self.vocab, &format!("[{dir}]")))
    }

    fn next_token_topk(&self, _c: &str, _k: usize) -> Result<TokenDistribution, PolicyError> {
        Err(unsupported())
    }
}

/// Board symbols that may appear in a rendered row.
fn alphabet(game: Game) -> &'static [char] {
    match game {
        Game::FrozenLake => &[' ', 'P', 'H', 'G'],
        Game::Sokoban => &['#', '_', 'O', 'X', '√', 'P'],
    }
}

/// The last rendered board inside `text`, as rows of symbols.
fn last_board(game: Game, text: &str) -> Option<Vec<Vec<char>>> {
    let (w, h) = game.dims();
    let rows: Vec<Vec<char>> = text.split('\n').map(|l| l.chars().collect()).collect();
    let is_row = |r: &Vec<char>| r.len() == w && r.iter().all(|c| alphabet(game).contains(c));
    (0..=rows.len().saturating_sub(h)).rev().find_map(|i| {
        let block = rows.get(i..i + h)?;
        let players = block.iter().flatten().filter(|&&c| c == 'P').count();
        (block.iter().all(is_row) && players == 1).then(|| block.to_vec())
    })
}

/// Reconstructs the current position from the observations in a rendered
/// chat. The returned map starts at the current player and box positions.
/// A target hidden under the player is recovered from earlier boards.
pub fn latest_state(game: Game, context: &str) -> Option<GridMap> {
    let chat = Chat::parse_open(context)?;
    let users: Vec<&str> = chat.messages.iter().filter(|m| m.role == Role::User).map(|m| m.content.as_str()).collect();
    let board = last_board(game, users.last()?)?;
    let (w, h) = game.dims();
    let mut target = None;
    for b in users.iter().filter_map(|u| last_board(game, u)) {
        for (r, row) in b.iter().enumerate() {
            for (c, &ch) in row.iter().enumerate() {
                if ch == 'O' || ch == '√' {
                    target = Some(Pos::new(r, c));
                }
            }
        }
    }
    let mut cells = Vec::with_capacity(w * h);
    let mut player = None;
    let mut boxed = None;
    for (r, row) in board.iter().enumerate() {
        for (c, &ch) in row.iter().enumerate() {
            let pos = Pos::new(r, c);
            cells.push(match ch {
                'H' => Cell::Hole,
                'G' => Cell::Goal,
                '#' => Cell::Wall,
                'O' | '√' => Cell::Target,
                _ => Cell::Empty,
            });
            match ch {
                'P' => player = Some(pos),
                'X' | '√' => boxed = Some(pos),
                _ => {}
            }
        }
    }
    if let Some(t) = target {
        cells[t.row * w + t.col] = Cell::Target;
    }
    Some(GridMap::new(game, w, h, cells, player?, boxed))
}

/// Reads the board out of the prompt and plays a shortest solution.
#[derive(Debug, Clone)]
pub struct OraclePolicy {
    game: Game,
    vocab: Arc<Vocab>,
}

impl OraclePolicy {
    pub fn new(game: Game) -> Self {
        OraclePolicy { game, vocab: Vocab::standard() }
    }

    /// First move of a shortest win from the latest board in `context`.
    pub fn choose(&self, context: &str) -> Option<Direction> {
        let map = latest_state(self.game, context)?;
        solve(&map, 32)?.first().copied()
    }
}

impl Policy for OraclePolicy {
    fn tag(&self) -> String {
        format!("bfs-oracle:{}", self.game)
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn sample_response(&self, context: &str, _t: f64, _m: usize, _s: u64) -> Result<Response, PolicyError> {
        let dir = self.choose(context).unwrap_or(Direction::Up);
        Ok(Response::from_text(&self.vocab, &format!("[{dir}]")))
    }

    fn next_token_topk(&self, _c: &str, _k: usize) -> Result<TokenDistribution, PolicyError> {
        Err(unsupported())
    }
}
