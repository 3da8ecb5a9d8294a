use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance kept between a clipped position and the wall it ran into.
pub const WALL_MARGIN: f64 = 1e-6;

/// Axis-aligned box `[min, max]` in maze coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Region {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Region { min, max }
    }

    /// The full unit cell at `(row, col)`.
    pub fn cell(row: usize, col: usize) -> Self {
        Region { min: [col as f64, row as f64], max: [col as f64 + 1.0, row as f64 + 1.0] }
    }

    /// The central `[0.25, 0.75]` part of a cell.
    pub fn cell_core(row: usize, col: usize) -> Self {
        Region {
            min: [col as f64 + 0.25, row as f64 + 0.25],
            max: [col as f64 + 0.75, row as f64 + 0.75],
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.min[0] + self.max[0]) * 0.5, (self.min[1] + self.max[1]) * 0.5]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        [
            self.min[0] + (self.max[0] - self.min[0]) * rng.random::<f64>(),
            self.min[1] + (self.max[1] - self.min[1]) * rng.random::<f64>(),
        ]
    }
}

/// A 2-D point mass moving through a grid of unit cells.
///
/// Positions are `(x, y)` with cell `(row, col)` covering `x in [col, col + 1)` and
/// `y in [row, row + 1)`. Anything outside the grid counts as wall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMazeSpec {
    /// `grid[row][col] == true` marks a wall.
    pub grid: Vec<Vec<bool>>,
    pub start_region: Region,
    pub goal_region: Region,
    pub max_episode_steps: usize,
    /// Displacement per unit action, in cells. At most 1.
    pub action_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MazeLayout {
    Medium,
    Large,
}

const MEDIUM: [&str; 5] = ["S.#..", "#.#.#", ".....", ".###.", "...#G"];

const LARGE: [&str; 8] = [
    "S...#...",
    "###.#.#.",
    "......#.",
    ".####.#.",
    "...#....",
    "##.#.##.",
    "....#...",
    ".###...G",
];

fn parse_layout(rows: &[&str]) -> (Vec<Vec<bool>>, (usize, usize), (usize, usize)) {
    let mut start = (0, 0);
    let mut goal = (0, 0);
    let grid = rows
        .iter()
        .enumerate()
        .map(|(r, line)| {
            line.chars()
                .enumerate()
                .map(|(c, ch)| {
                    match ch {
                        'S' => start = (r, c),
                        'G' => goal = (r, c),
                        _ => {}
                    }
                    ch == '#'
                })
                .collect()
        })
        .collect();
    (grid, start, goal)
}

impl MazeLayout {
    pub fn spec(self) -> PointMazeSpec {
        let (rows, steps): (&[&str], usize) = match self {
            MazeLayout::Medium => (&MEDIUM, 60),
            MazeLayout::Large => (&LARGE, 50),
        };
        let (grid, start, goal) = parse_layout(rows);
        PointMazeSpec {
            grid,
            start_region: Region::cell_core(start.0, start.1),
            goal_region: Region::cell(goal.0, goal.1),
            max_episode_steps: steps,
            action_scale: 0.5,
        }
    }
}

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// The goal was reached; no bootstrapping past this transition.
    pub terminal: bool,
    /// The step limit was hit without reaching the goal.
    pub truncated: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

impl PointMazeSpec {
    pub fn rows(&self) -> usize {
        self.grid.len()
    }

    pub fn cols(&self) -> usize {
        self.grid.first().map_or(0, Vec::len)
    }

    pub fn d_state(&self) -> usize {
        2
    }

    pub fn d_action(&self) -> usize {
        2
    }

    pub fn is_wall(&self, row: i64, col: i64) -> bool {
        if row < 0 || col < 0 || row as usize >= self.rows() || col as usize >= self.cols() {
            return true;
        }
        self.grid[row as usize][col as usize]
    }

    /// Cell `(row, col)` holding a point, if it lies inside the grid.
    pub fn cell_of(&self, p: &[f64]) -> Option<(usize, usize)> {
        if !(p[0].is_finite() && p[1].is_finite()) {
            return None;
        }
        let (c, r) = (p[0].floor(), p[1].floor());
        if c < 0.0 || r < 0.0 || c as usize >= self.cols() || r as usize >= self.rows() {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn is_free(&self, p: &[f64]) -> bool {
        self.cell_of(p).is_some_and(|(r, c)| !self.grid[r][c])
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        (0..self.rows())
            .flat_map(|r| (0..self.cols()).map(move |c| (r, c)))
            .filter(|&(r, c)| !self.grid[r][c])
            .collect()
    }

    fn region_is_free(&self, region: &Region) -> bool {
        let inner = 1e-9;
        let (c0, c1) = ((region.min[0] + inner).floor() as i64, (region.max[0] - inner).floor() as i64);
        let (r0, r1) = ((region.min[1] + inner).floor() as i64, (region.max[1] - inner).floor() as i64);
        region.min[0] <= region.max[0]
            && region.min[1] <= region.max[1]
            && (r0..=r1).all(|r| (c0..=c1).all(|c| !self.is_wall(r, c)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows() == 0 || self.cols() == 0 || self.grid.iter().any(|row| row.len() != self.cols()) {
            return Err(Error::Config("maze grid must be a non-empty rectangle".into()));
        }
        if self.max_episode_steps == 0 {
            return Err(Error::Config("max_episode_steps must be at least 1".into()));
        }
        if !(self.action_scale > 0.0 && self.action_scale <= 1.0) {
            return Err(Error::Config(format!("action_scale {} outside (0, 1]", self.action_scale)));
        }
        if !self.region_is_free(&self.start_region) {
            return Err(Error::Config("start region overlaps a wall".into()));
        }
        if !self.region_is_free(&self.goal_region) {
            return Err(Error::Config("goal region overlaps a wall".into()));
        }
        Ok(())
    }

    /// Moves along one axis from `pos` by `delta`, stopping short of the first blocked cell.
    fn slide(&self, pos: [f64; 2], axis: usize, delta: f64) -> f64 {
        let other = 1 - axis;
        let fixed = pos[other].floor() as i64;
        let from = pos[axis];
        let target = from + delta;
        let blocked = |k: i64| {
            if axis == 0 {
                self.is_wall(fixed, k)
            } else {
                self.is_wall(k, fixed)
            }
        };
        let c0 = from.floor() as i64;
        let c1 = target.floor() as i64;
        if c1 > c0 {
            for k in c0 + 1..=c1 {
                if blocked(k) {
                    return k as f64 - WALL_MARGIN;
                }
            }
        } else if c1 < c0 {
            for k in (c1..c0).rev() {
                if blocked(k) {
                    return (k + 1) as f64 + WALL_MARGIN;
                }
            }
        }
        target
    }

    /// Displacement dynamics: x moves first, then y, each clipped at the first wall.
    pub fn move_point(&self, state: &[f64], action: &[f64]) -> [f64; 2] {
        let mut p = [state[0], state[1]];
        p[0] = self.slide(p, 0, self.action_scale * action[0]);
        p[1] = self.slide(p, 1, self.action_scale * action[1]);
        p
    }

    /// One environment transition from `state` after `steps_taken` earlier steps.
    ///
    /// Reward is 0 when the next position lies in the goal region and -1 otherwise.
    /// The goal is absorbing: a state already inside it stays put with reward 0.
    pub fn step(&self, state: &[f64], action: &[f64], steps_taken: usize) -> Result<StepOutcome> {
        if state.len() != 2 || action.len() != 2 {
            return Err(Error::Dimension(format!(
                "point maze expects 2-D state and action, got {} and {}",
                state.len(),
                action.len()
            )));
        }
        if !self.is_free(state) {
            return Err(Error::Domain(format!("state {state:?} is outside the free space")));
        }
        if action.iter().any(|a| !a.is_finite() || a.abs() > 1.0 + 1e-12) {
            return Err(Error::Domain(format!("action {action:?} outside [-1, 1]^2")));
        }
        if self.goal_region.contains(state) {
            return Ok(StepOutcome { next_state: state.to_vec(), reward: 0.0, terminal: true, truncated: false });
        }
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let next = self.move_point(state, &a);
        let terminal = self.goal_region.contains(&next);
        let truncated = !terminal && steps_taken + 1 >= self.max_episode_steps;
        Ok(StepOutcome {
            next_state: next.to_vec(),
            reward: if terminal { 0.0 } else { -1.0 },
            terminal,
            truncated,
        })
    }

    /// Affine map from maze coordinates onto `[-1, 1]^2`: `(shift, scale)` per dimension.
    pub fn state_normalizer(&self) -> (Vec<f64>, Vec<f64>) {
        let (w, h) = (self.cols() as f64, self.rows() as f64);
        (vec![w * 0.5, h * 0.5], vec![2.0 / w, 2.0 / h])
    }

    /// Shortest-path distances (in cell moves, 4-connected) from every cell to `goal`.
    pub fn cell_distances(&self, goal: (usize, usize)) -> Vec<Vec<Option<usize>>> {
        let mut dist = vec![vec![None; self.cols()]; self.rows()];
        if self.grid[goal.0][goal.1] {
            return dist;
        }
        let mut queue = std::collections::VecDeque::new();
        dist[goal.0][goal.1] = Some(0);
        queue.push_back(goal);
        while let Some((r, c)) = queue.pop_front() {
            let d = dist[r][c].unwrap();
            for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if self.is_wall(nr, nc) {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if dist[nr][nc].is_none() {
                    dist[nr][nc] = Some(d + 1);
                    queue.push_back((nr, nc));
                }
            }
        }
        dist
    }

    /// Uniform initial state from the start region.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.start_region.sample(rng).to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corridor() -> PointMazeSpec {
        // one row: wall | free | free | free | wall
        PointMazeSpec {
            grid: vec![vec![true, false, false, false, true]],
            start_region: Region::cell_core(0, 1),
            goal_region: Region::new([2.0, 0.0], [2.05, 0.05]),
            max_episode_steps: 10,
            action_scale: 0.5,
        }
    }

    #[test]
    fn shipped_layouts_validate_and_connect() {
        for layout in [MazeLayout::Medium, MazeLayout::Large] {
            let spec = layout.spec();
            spec.validate().unwrap();
            let goal = spec.cell_of(&spec.goal_region.center()).unwrap();
            let dist = spec.cell_distances(goal);
            for (r, c) in spec.free_cells() {
                assert!(dist[r][c].is_some(), "{layout:?} cell {r},{c} unreachable");
            }
        }
        assert_eq!(MazeLayout::Medium.spec().rows(), 5);
        assert_eq!(MazeLayout::Large.spec().cols(), 8);
    }

    #[test]
    fn goal_is_absorbing() {
        let spec = MazeLayout::Medium.spec();
        let g = spec.goal_region.center();
        let out = spec.step(&g, &[1.0, -1.0], 0).unwrap();
        assert!(out.terminal && out.done());
        assert_eq!(out.reward, 0.0);
        assert_eq!(out.next_state, g.to_vec());
    }

    #[test]
    fn zero_action_stays_put() {
        let spec = MazeLayout::Large.spec();
        let s = [0.5, 0.5];
        let out = spec.step(&s, &[0.0, 0.0], 0).unwrap();
        assert_eq!(out.next_state, s.to_vec());
        assert_eq!(out.reward, -1.0);
        assert!(!out.done());
    }

    #[test]
    fn corridor_clipping() {
        let spec = corridor();
        // From x = 1.2 pushing left by 0.5 would reach 0.7, inside the wall cell 0.
        let out = spec.step(&[1.2, 0.5], &[-1.0, 0.0], 0).unwrap();
        assert_eq!(out.next_state, vec![1.0 + WALL_MARGIN, 0.5]);
        // Pushing up from y = 0.8 leaves the grid: clipped below the top edge.
        let out = spec.step(&[1.5, 0.8], &[0.0, 1.0], 0).unwrap();
        assert_eq!(out.next_state, vec![1.5, 1.0 - WALL_MARGIN]);
        // Diagonal into the right wall: x clipped, y still moves.
        let out = spec.step(&[3.7, 0.3], &[1.0, 0.4], 0).unwrap();
        assert_eq!(out.next_state, vec![4.0 - WALL_MARGIN, 0.5]);
        // Short of the wall nothing is clipped.
        let out = spec.step(&[3.4, 0.3], &[1.0, 0.0], 0).unwrap();
        assert_eq!(out.next_state, vec![3.9, 0.3]);
    }

    #[test]
    fn truncation_at_step_limit() {
        let spec = corridor();
        let out = spec.step(&[1.5, 0.5], &[0.0, 0.0], spec.max_episode_steps - 1).unwrap();
        assert!(out.truncated && !out.terminal);
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = corridor();
        assert!(matches!(spec.step(&[0.5, 0.5], &[0.0, 0.0], 0), Err(Error::Domain(_))));
        assert!(matches!(spec.step(&[5.0, 0.5], &[0.0, 0.0], 0), Err(Error::Domain(_))));
        assert!(matches!(spec.step(&[1.5, 0.5], &[1.5, 0.0], 0), Err(Error::Domain(_))));
        let mut bad = corridor();
        bad.max_episode_steps = 0;
        assert!(bad.validate().is_err());
        let mut bad = corridor();
        bad.goal_region = Region::cell(0, 0);
        assert!(bad.validate().is_err());
    }
}
