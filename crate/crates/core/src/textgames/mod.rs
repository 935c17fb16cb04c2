//! Frozen Lake and single-box Sokoban as deterministic text environments.
//!
//! Every observation handed to a policy is plain text: one of a fixed set of
//! feedback sentences followed by a blank line and an ASCII render of the
//! board. Rules are never stated; the initial prompt only says how to act.

mod generate;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit;

pub use generate::{
    all_frozen_lake_layouts, generate_map, generate_map_in_split, solve, MapSplit, DEFAULT_HORIZON,
    MAX_GENERATION_ATTEMPTS,
};

/// Task description that replaces the explicit game rules. Shared by both games.
pub const TASK_DESCRIPTION: &str = "You are the player and you are represented by 'P' on the grid. You should select the best action to reach the goal in the shortest number of steps. Your only way to interact is to move one step each time. Available actions: up, down, left, right (or w, a, s, d). Type your action as: [up], [down], [left], [right] or [w], [a], [s], [d]\n";

pub const FEEDBACK_INVALID_FORMAT: &str = "Invalid move format. Wrap your action in square brackets.";
pub const FEEDBACK_OFF_GRID: &str = "You tried to move off the grid and stayed in place.";
pub const FEEDBACK_HIT_WALL: &str = "You hit a wall and stayed in place.";
pub const FEEDBACK_BOX_BLOCKED: &str = "The box cannot be pushed through a wall; you stayed in place.";
pub const FEEDBACK_HOLE: &str = "You fell into a hole. Game over.";
pub const FEEDBACK_GOAL: &str = "You reached the goal. You win!";
pub const FEEDBACK_BOX_ON_TARGET: &str = "The box is on the target. You win!";

pub fn feedback_moved(direction: Direction) -> String {
    format!("You moved {direction}.")
}

pub fn feedback_pushed(direction: Direction) -> String {
    format!("You pushed the box {direction}.")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Game {
    FrozenLake,
    Sokoban,
}

impl Game {
    pub fn name(self) -> &'static str {
        match self {
            Game::FrozenLake => "frozen_lake",
            Game::Sokoban => "sokoban",
        }
    }

    pub fn dims(self) -> (usize, usize) {
        match self {
            Game::FrozenLake => (3, 3),
            Game::Sokoban => (6, 6),
        }
    }
}

impl fmt::Display for Game {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Game {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "frozen_lake" | "frozenlake" => Ok(Game::FrozenLake),
            "sokoban" => Ok(Game::Sokoban),
            other => Err(format!("unknown game `{other}` (expected frozen_lake or sokoban)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    Empty,
    Hole,
    Goal,
    Wall,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

impl Pos {
    pub const fn new(row: usize, col: usize) -> Self {
        Pos { row, col }
    }

    /// Neighbouring cell in `direction`, or `None` when it leaves a
    /// `height` x `width` grid.
    pub fn offset(self, direction: Direction, height: usize, width: usize) -> Option<Pos> {
        let (dr, dc) = direction.delta();
        let row = self.row as isize + dr;
        let col = self.col as isize + dc;
        if row < 0 || col < 0 || row >= height as isize || col >= width as isize {
            None
        } else {
            Some(Pos::new(row as usize, col as usize))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn delta(self) -> (isize, isize) {
        match self {
            Direction::Up => (-1, 0),
            Direction::Down => (1, 0),
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A parsed move. Only [`parse_action`] builds one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Action {
    direction: Direction,
}

impl Action {
    pub fn direction(self) -> Direction {
        self.direction
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GameError {
    #[error("no bracketed action found in response")]
    NoActionFound,
    #[error("step called on a finished episode")]
    StepOnTerminal,
    #[error("no solvable {game} map after {attempts} attempts (seed {seed})")]
    GenerationExhausted { game: Game, seed: u64, attempts: usize },
}

/// Returns the action named by the last bracketed token that spells a move.
pub fn parse_action(response: &str) -> Result<Action, GameError> {
    let mut found = None;
    for (open, _) in response.match_indices('[') {
        let rest = &response[open + 1..];
        let Some(close) = rest.find(']') else { break };
        let inner = rest[..close].trim().to_ascii_lowercase();
        let direction = match inner.as_str() {
            "up" | "w" => Direction::Up,
            "down" | "s" => Direction::Down,
            "left" | "a" => Direction::Left,
            "right" | "d" => Direction::Right,
            _ => continue,
        };
        found = Some(Action { direction });
    }
    found.ok_or(GameError::NoActionFound)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridMap {
    pub game: Game,
    pub width: usize,
    pub height: usize,
    /// Row-major, `height * width` entries.
    pub cells: Vec<Cell>,
    pub player_start: Pos,
    pub box_start: Option<Pos>,
    pub map_id: String,
}

impl GridMap {
    /// Builds a map and derives its id from the full layout.
    pub fn new(
        game: Game,
        width: usize,
        height: usize,
        cells: Vec<Cell>,
        player_start: Pos,
        box_start: Option<Pos>,
    ) -> Self {
        assert_eq!(cells.len(), width * height, "cell grid does not match dimensions");
        let map_id = layout_id(game, width, height, &cells, player_start, box_start);
        GridMap { game, width, height, cells, player_start, box_start, map_id }
    }

    pub fn cell(&self, pos: Pos) -> Cell {
        self.cells[pos.row * self.width + pos.col]
    }

    pub fn positions_of(&self, cell: Cell) -> Vec<Pos> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| Pos::new(r, c)))
            .filter(|&p| self.cell(p) == cell)
            .collect()
    }

    /// Checks the structural invariants for the map's game.
    pub fn validate(&self) -> Result<(), String> {
        let (w, h) = self.game.dims();
        if (self.width, self.height) != (w, h) {
            return Err(format!("{} maps are {w}x{h}", self.game));
        }
        let count = |cell| self.cells.iter().filter(|&&c| c == cell).count();
        match self.game {
            Game::FrozenLake => {
                if count(Cell::Hole) != 2 || count(Cell::Goal) != 1 {
                    return Err("frozen lake needs exactly 2 holes and 1 goal".into());
                }
                if self.cell(self.player_start) != Cell::Empty {
                    return Err("player must start on a frozen cell".into());
                }
                if self.box_start.is_some() {
                    return Err("frozen lake has no box".into());
                }
            }
            Game::Sokoban => {
                for r in 0..h {
                    for c in 0..w {
                        let border = r == 0 || c == 0 || r == h - 1 || c == w - 1;
                        if border && self.cell(Pos::new(r, c)) != Cell::Wall {
                            return Err("sokoban border must be walls".into());
                        }
                    }
                }
                if count(Cell::Target) != 1 || count(Cell::Hole) != 0 || count(Cell::Goal) != 0 {
                    return Err("sokoban needs exactly 1 target and no holes or goals".into());
                }
                let Some(b) = self.box_start else {
                    return Err("sokoban needs a box".into());
                };
                if self.cell(b) == Cell::Wall || self.cell(self.player_start) == Cell::Wall {
                    return Err("box and player must not start on walls".into());
                }
                if b == self.player_start {
                    return Err("box and player overlap".into());
                }
            }
        }
        Ok(())
    }
}

fn layout_id(game: Game, width: usize, height: usize, cells: &[Cell], player: Pos, boxed: Option<Pos>) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(game.name().as_bytes());
    hasher.update([width as u8, height as u8]);
    hasher.update(cells.iter().map(|&c| c as u8).collect::<Vec<_>>());
    hasher.update([player.row as u8, player.col as u8]);
    match boxed {
        Some(b) => hasher.update([1, b.row as u8, b.col as u8]),
        None => hasher.update([0]),
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Renders the board with the player (and box) at the given positions.
///
/// Frozen Lake: `P` player, `H` hole, `G` goal, space for frozen ice.
/// Sokoban: `#` wall, `P` player, `X` box, `O` empty target, `√` box on
/// target, `_` floor. Rows are joined with `\n`, no trailing newline.
pub fn render_board(map: &GridMap, player: Pos, boxed: Option<Pos>) -> String {
    let mut rows = Vec::with_capacity(map.height);
    for r in 0..map.height {
        let mut row = String::with_capacity(map.width);
        for c in 0..map.width {
            let pos = Pos::new(r, c);
            let cell = map.cell(pos);
            let ch = if pos == player {
                'P'
            } else if Some(pos) == boxed {
                if cell == Cell::Target {
                    '√'
                } else {
                    'X'
                }
            } else {
                match (map.game, cell) {
                    (_, Cell::Hole) => 'H',
                    (_, Cell::Goal) => 'G',
                    (_, Cell::Wall) => '#',
                    (_, Cell::Target) => 'O',
                    (Game::FrozenLake, Cell::Empty) => ' ',
                    (Game::Sokoban, Cell::Empty) => '_',
                }
            };
            row.push(ch);
        }
        rows.push(row);
    }
    rows.join("\n")
}

/// The first observation of an episode: task description, blank line, board.
pub fn initial_prompt(map: &GridMap) -> String {
    format!("{TASK_DESCRIPTION}\n{}", render_board(map, map.player_start, map.box_start))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Won,
    Lost,
    Exhausted,
}

/// Where a single move lands, independent of turn bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Transition {
    OffGrid,
    HitWall,
    BoxBlocked,
    Moved { player: Pos },
    Pushed { player: Pos, boxed: Pos },
    FellInHole { player: Pos },
    ReachedGoal { player: Pos },
    BoxOnTarget { player: Pos, boxed: Pos },
}

pub(crate) fn transition(map: &GridMap, player: Pos, boxed: Option<Pos>, dir: Direction) -> Transition {
    let Some(next) = player.offset(dir, map.height, map.width) else {
        return Transition::OffGrid;
    };
    match map.game {
        Game::FrozenLake => match map.cell(next) {
            Cell::Hole => Transition::FellInHole { player: next },
            Cell::Goal => Transition::ReachedGoal { player: next },
            Cell::Wall => Transition::HitWall,
            _ => Transition::Moved { player: next },
        },
        Game::Sokoban => {
            if map.cell(next) == Cell::Wall {
                return Transition::HitWall;
            }
            if Some(next) != boxed {
                return Transition::Moved { player: next };
            }
            match next.offset(dir, map.height, map.width) {
                Some(beyond) if map.cell(beyond) != Cell::Wall => {
                    if map.cell(beyond) == Cell::Target {
                        Transition::BoxOnTarget { player: next, boxed: beyond }
                    } else {
                        Transition::Pushed { player: next, boxed: beyond }
                    }
                }
                _ => Transition::BoxBlocked,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameState {
    pub map: GridMap,
    pub player: Pos,
    #[serde(rename = "box")]
    pub boxed: Option<Pos>,
    pub turn_index: usize,
    pub max_turns: usize,
    pub status: Status,
}

impl GameState {
    /// Starts an episode. Each call counts as one environment instantiation.
    pub fn new(map: GridMap, max_turns: usize) -> Self {
        audit::record_env_instantiation();
        GameState {
            player: map.player_start,
            boxed: map.box_start,
            map,
            turn_index: 0,
            max_turns: max_turns.max(1),
            status: Status::Running,
        }
    }

    pub fn render(&self) -> String {
        render_board(&self.map, self.player, self.boxed)
    }

    /// Applies one move and returns the next state with its observation.
    pub fn step(&self, action: Action) -> Result<(GameState, String), GameError> {
        if self.status != Status::Running {
            return Err(GameError::StepOnTerminal);
        }
        let dir = action.direction();
        let mut next = self.clone();
        let sentence = match transition(&self.map, self.player, self.boxed, dir) {
            Transition::OffGrid => FEEDBACK_OFF_GRID.to_string(),
            Transition::HitWall => FEEDBACK_HIT_WALL.to_string(),
            Transition::BoxBlocked => FEEDBACK_BOX_BLOCKED.to_string(),
            Transition::Moved { player } => {
                next.player = player;
                feedback_moved(dir)
            }
            Transition::Pushed { player, boxed } => {
                next.player = player;
                next.boxed = Some(boxed);
                feedback_pushed(dir)
            }
            Transition::FellInHole { player } => {
                next.player = player;
                next.status = Status::Lost;
                FEEDBACK_HOLE.to_string()
            }
            Transition::ReachedGoal { player } => {
                next.player = player;
                next.status = Status::Won;
                FEEDBACK_GOAL.to_string()
            }
            Transition::BoxOnTarget { player, boxed } => {
                next.player = player;
                next.boxed = Some(boxed);
                next.status = Status::Won;
                FEEDBACK_BOX_ON_TARGET.to_string()
            }
        };
        Ok(next.finish_turn(&sentence))
    }

    /// A turn whose response carried no parseable action: the board is
    /// unchanged but the turn is spent.
    pub fn step_invalid(&self) -> Result<(GameState, String), GameError> {
        if self.status != Status::Running {
            return Err(GameError::StepOnTerminal);
        }
        Ok(self.clone().finish_turn(FEEDBACK_INVALID_FORMAT))
    }

    fn finish_turn(mut self, sentence: &str) -> (GameState, String) {
        self.turn_index += 1;
        if self.status == Status::Running && self.turn_index >= self.max_turns {
            self.status = Status::Exhausted;
        }
        let feedback = format!("{sentence}\n\n{}", self.render());
        (self, feedback)
    }
}
