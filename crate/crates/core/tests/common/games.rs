//! Independent game oracles: a character-grid transition function, a
//! breadth-first solver built on it, and the exact win probability of a
//! uniformly random mover.

use std::collections::{HashSet, VecDeque};

use oel::harness::{eval_pass_rate, heldout_maps, EvalSpec};
use oel::policy::scripted::UniformRandomPolicy;
use oel::textgames::*;
use oel::trajectory::EpisodeConfig;

pub const DIRS: [(Direction, isize, isize); 4] =
    [(Direction::Up, -1, 0), (Direction::Down, 1, 0), (Direction::Left, 0, -1), (Direction::Right, 0, 1)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Oracle {
    Stay(&'static str),
    Move(usize, usize, Option<(usize, usize)>),
    Win(usize, usize, Option<(usize, usize)>),
    Lose(usize, usize),
}

pub fn char_grid(map: &GridMap) -> Vec<Vec<char>> {
    (0..map.height)
        .map(|r| {
            (0..map.width)
                .map(|c| match map.cells[r * map.width + c] {
                    Cell::Empty => '.',
                    Cell::Hole => 'H',
                    Cell::Goal => 'G',
                    Cell::Wall => '#',
                    Cell::Target => 'O',
                })
                .collect()
        })
        .collect()
}

pub fn oracle(
    grid: &[Vec<char>],
    sokoban: bool,
    p: (usize, usize),
    b: Option<(usize, usize)>,
    d: (isize, isize),
) -> Oracle {
    let h = grid.len() as isize;
    let w = grid[0].len() as isize;
    let (r, c) = (p.0 as isize + d.0, p.1 as isize + d.1);
    if r < 0 || c < 0 || r >= h || c >= w {
        return Oracle::Stay(FEEDBACK_OFF_GRID);
    }
    let (r, c) = (r as usize, c as usize);
    let ch = grid[r][c];
    if !sokoban {
        return match ch {
            'H' => Oracle::Lose(r, c),
            'G' => Oracle::Win(r, c, None),
            _ => Oracle::Move(r, c, None),
        };
    }
    if ch == '#' {
        return Oracle::Stay(FEEDBACK_HIT_WALL);
    }
    if b != Some((r, c)) {
        return Oracle::Move(r, c, b);
    }
    let (br, bc) = (r as isize + d.0, c as isize + d.1);
    if br < 0 || bc < 0 || br >= h || bc >= w || grid[br as usize][bc as usize] == '#' {
        return Oracle::Stay(FEEDBACK_BOX_BLOCKED);
    }
    let nb = (br as usize, bc as usize);
    if grid[nb.0][nb.1] == 'O' {
        Oracle::Win(r, c, Some(nb))
    } else {
        Oracle::Move(r, c, Some(nb))
    }
}

pub fn action(d: Direction) -> Action {
    parse_action(&format!("[{}]", d.name())).unwrap()
}

pub fn check_against_oracle(map: &GridMap, player: Pos, boxed: Option<Pos>) {
    let grid = char_grid(map);
    let sokoban = map.game == Game::Sokoban;
    let mut state = GameState::new(map.clone(), 5);
    state.player = player;
    state.boxed = boxed;
    for (dir, dr, dc) in DIRS {
        let expect = oracle(&grid, sokoban, (player.row, player.col), boxed.map(|b| (b.row, b.col)), (dr, dc));
        let (next, feedback) = state.step(action(dir)).unwrap();
        let got_box = next.boxed.map(|b| (b.row, b.col));
        match expect {
            Oracle::Stay(msg) => {
                assert_eq!(next.player, player, "{dir:?} from {player:?}");
                assert_eq!(next.boxed, boxed);
                assert_eq!(next.status, Status::Running);
                assert!(feedback.starts_with(msg), "{feedback}");
            }
            Oracle::Move(r, c, b) => {
                assert_eq!((next.player.row, next.player.col), (r, c));
                assert_eq!(got_box, b);
                assert_eq!(next.status, Status::Running);
                let expect_msg =
                    if b != boxed.map(|x| (x.row, x.col)) { feedback_pushed(dir) } else { feedback_moved(dir) };
                assert!(feedback.starts_with(&expect_msg), "{feedback}");
            }
            Oracle::Win(r, c, b) => {
                assert_eq!((next.player.row, next.player.col), (r, c));
                assert_eq!(got_box, b);
                assert_eq!(next.status, Status::Won);
            }
            Oracle::Lose(r, c) => {
                assert_eq!((next.player.row, next.player.col), (r, c));
                assert_eq!(next.status, Status::Lost);
                assert!(feedback.starts_with(FEEDBACK_HOLE));
            }
        }
        assert_eq!(next.turn_index, 1);
    }
}

pub fn oracle_solvable(map: &GridMap, horizon: usize) -> bool {
    let grid = char_grid(map);
    let sokoban = map.game == Game::Sokoban;
    let start = ((map.player_start.row, map.player_start.col), map.box_start.map(|b| (b.row, b.col)));
    let mut seen = HashSet::from([start]);
    let mut queue = VecDeque::from([(start, 0)]);
    while let Some(((p, b), depth)) = queue.pop_front() {
        if depth == horizon {
            continue;
        }
        for (_, dr, dc) in DIRS {
            match oracle(&grid, sokoban, p, b, (dr, dc)) {
                Oracle::Win(..) => return true,
                Oracle::Move(r, c, nb) if seen.insert(((r, c), nb)) => {
                    queue.push_back((((r, c), nb), depth + 1));
                }
                _ => {}
            }
        }
    }
    false
}

/// Exact probability that uniformly random moves win within `turns` turns.
pub fn random_win_probability(map: &GridMap, turns: usize) -> f64 {
    let grid = char_grid(map);
    let (h, w) = (map.height, map.width);
    // value[r][c] = win probability with t turns left from (r, c)
    let mut value = vec![vec![0.0f64; w]; h];
    for _ in 0..turns {
        let mut next = vec![vec![0.0f64; w]; h];
        for r in 0..h {
            for c in 0..w {
                let mut v = 0.0;
                for (_, dr, dc) in DIRS {
                    v += 0.25
                        * match oracle(&grid, false, (r, c), None, (dr, dc)) {
                            Oracle::Win(..) => 1.0,
                            Oracle::Lose(..) => 0.0,
                            Oracle::Move(nr, nc, _) => value[nr][nc],
                            Oracle::Stay(_) => value[r][c],
                        };
                }
                next[r][c] = v;
            }
        }
        value = next;
    }
    value[map.player_start.row][map.player_start.col]
}

/// Uniform-random pass rate over 128 held-out maps × 10 seeds against the
/// exact absorption probability: `(empirical, exact, z)`.
pub fn random_policy_z_score() -> (f64, f64, f64) {
    let spec = EvalSpec { game: Game::FrozenLake, num_maps: 128, num_seeds: 10, episode: EpisodeConfig::default() };
    let maps = heldout_maps(Game::FrozenLake, spec.num_maps);
    let probs: Vec<f64> = maps.iter().map(|m| random_win_probability(m, spec.episode.max_turns)).collect();
    let n = (spec.num_maps * spec.num_seeds) as f64;
    let mean = probs.iter().sum::<f64>() / probs.len() as f64;
    let var = probs.iter().map(|p| p * (1.0 - p)).sum::<f64>() * spec.num_seeds as f64 / (n * n);
    let report = eval_pass_rate(&UniformRandomPolicy::default(), None, &spec);
    assert_eq!(report.episodes, 1280);
    (report.pass_rate, mean, (report.pass_rate - mean) / var.sqrt())
}
