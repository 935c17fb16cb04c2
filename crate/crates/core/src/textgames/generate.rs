use std::collections::{HashMap, VecDeque};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{transition, Cell, Direction, Game, GameError, GridMap, Pos, Transition};

/// Episode length the generators guarantee a solution within.
pub const DEFAULT_HORIZON: usize = 5;
pub const MAX_GENERATION_ATTEMPTS: usize = 10_000;

/// Disjoint partition of layouts by `map_id`. Evaluation draws only from
/// `HeldOut`, training only from `Train`, so the two never share a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSplit {
    Any,
    Train,
    HeldOut,
}

impl MapSplit {
    pub fn of(map_id: &str) -> MapSplit {
        let byte = u8::from_str_radix(&map_id[..2], 16).unwrap_or(0);
        if byte.is_multiple_of(4) {
            MapSplit::HeldOut
        } else {
            MapSplit::Train
        }
    }

    pub fn admits(self, map_id: &str) -> bool {
        self == MapSplit::Any || MapSplit::of(map_id) == self
    }
}

/// Shortest move sequence that wins, or `None` if no win exists within
/// `horizon` moves.
pub fn solve(map: &GridMap, horizon: usize) -> Option<Vec<Direction>> {
    type Node = (Pos, Option<Pos>);
    let start: Node = (map.player_start, map.box_start);
    let mut parent: HashMap<Node, (Node, Direction)> = HashMap::new();
    let mut queue = VecDeque::from([(start, 0usize)]);
    parent.insert(start, (start, Direction::Up));

    let reconstruct = |parent: &HashMap<Node, (Node, Direction)>, mut node: Node| {
        let mut path = Vec::new();
        while node != start {
            let (prev, dir) = parent[&node];
            path.push(dir);
            node = prev;
        }
        path.reverse();
        path
    };

    while let Some((node, depth)) = queue.pop_front() {
        if depth >= horizon {
            continue;
        }
        for dir in Direction::ALL {
            let next = match transition(map, node.0, node.1, dir) {
                Transition::ReachedGoal { .. } | Transition::BoxOnTarget { .. } => {
                    let mut path = reconstruct(&parent, node);
                    path.push(dir);
                    return Some(path);
                }
                Transition::FellInHole { .. } => continue,
                Transition::OffGrid | Transition::HitWall | Transition::BoxBlocked => continue,
                Transition::Moved { player } => (player, node.1),
                Transition::Pushed { player, boxed } => (player, Some(boxed)),
            };
            if let std::collections::hash_map::Entry::Vacant(e) = parent.entry(next) {
                e.insert((node, dir));
                queue.push_back((next, depth + 1));
            }
        }
    }
    None
}

fn seeded_rng(game: Game, seed: u64) -> ChaCha8Rng {
    let salt = match game {
        Game::FrozenLake => 0x6672_6f7a_656e_u64,
        Game::Sokoban => 0x736f_6b6f_6261_u64,
    };
    ChaCha8Rng::seed_from_u64(seed ^ salt.rotate_left(17))
}

fn frozen_lake_candidate(rng: &mut ChaCha8Rng) -> GridMap {
    // Start top-left, goal bottom-right, two holes among the other seven cells.
    let free: Vec<usize> = (1..8).collect();
    let picks = sample(rng, free.len(), 2);
    let mut cells = vec![Cell::Empty; 9];
    cells[8] = Cell::Goal;
    for i in picks.iter() {
        cells[free[i]] = Cell::Hole;
    }
    GridMap::new(Game::FrozenLake, 3, 3, cells, Pos::new(0, 0), None)
}

fn sokoban_candidate(rng: &mut ChaCha8Rng) -> GridMap {
    let interior: Vec<Pos> = (1..5).flat_map(|r| (1..5).map(move |c| Pos::new(r, c))).collect();
    let picks = sample(rng, interior.len(), 3);
    let (player, boxed, target) = (interior[picks.index(0)], interior[picks.index(1)], interior[picks.index(2)]);
    let mut cells = vec![Cell::Wall; 36];
    for p in &interior {
        cells[p.row * 6 + p.col] = Cell::Empty;
    }
    cells[target.row * 6 + target.col] = Cell::Target;
    GridMap::new(Game::Sokoban, 6, 6, cells, player, Some(boxed))
}

/// Deterministic in `(game, seed)`; the result is winnable within
/// [`DEFAULT_HORIZON`] moves.
pub fn generate_map(game: Game, seed: u64) -> Result<GridMap, GameError> {
    generate_map_in_split(game, seed, MapSplit::Any)
}

pub fn generate_map_in_split(game: Game, seed: u64, split: MapSplit) -> Result<GridMap, GameError> {
    let mut rng = seeded_rng(game, seed);
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let map = match game {
            Game::FrozenLake => frozen_lake_candidate(&mut rng),
            Game::Sokoban => sokoban_candidate(&mut rng),
        };
        if split.admits(&map.map_id) && solve(&map, DEFAULT_HORIZON).is_some() {
            return Ok(map);
        }
    }
    Err(GameError::GenerationExhausted { game, seed, attempts: MAX_GENERATION_ATTEMPTS })
}

/// Every Frozen Lake hole placement, solvable or not.
pub fn all_frozen_lake_layouts() -> Vec<GridMap> {
    let mut maps = Vec::with_capacity(21);
    for a in 1..8 {
        for b in (a + 1)..8 {
            let mut cells = vec![Cell::Empty; 9];
            cells[8] = Cell::Goal;
            cells[a] = Cell::Hole;
            cells[b] = Cell::Hole;
            maps.push(GridMap::new(Game::FrozenLake, 3, 3, cells, Pos::new(0, 0), None));
        }
    }
    maps
}
