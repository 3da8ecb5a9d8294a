use rand::Rng;

use super::maze::PointMazeSpec;
use crate::error::{Error, Result};

/// Scripted waypoint follower: heads for the center of the next cell on a shortest
/// grid path, then for the goal point once inside the goal cell. Uniform noise of
/// half-width `noise` is added to each action component before clipping.
#[derive(Debug, Clone)]
pub struct WaypointController<'a> {
    spec: &'a PointMazeSpec,
    goal_cell: (usize, usize),
    goal_point: [f64; 2],
    dist: Vec<Vec<Option<usize>>>,
    noise: f64,
}

impl<'a> WaypointController<'a> {
    pub fn new(spec: &'a PointMazeSpec, goal_point: [f64; 2], noise: f64) -> Result<Self> {
        let goal_cell = spec
            .cell_of(&goal_point)
            .filter(|&(r, c)| !spec.grid[r][c])
            .ok_or_else(|| Error::Generation(format!("waypoint {goal_point:?} is not in free space")))?;
        let dist = spec.cell_distances(goal_cell);
        Ok(WaypointController { spec, goal_cell, goal_point, dist, noise })
    }

    pub fn goal_point(&self) -> [f64; 2] {
        self.goal_point
    }

    /// Grid distance from the cell holding `state` to the goal cell.
    pub fn cells_to_go(&self, state: &[f64]) -> Option<usize> {
        let (r, c) = self.spec.cell_of(state)?;
        self.dist[r][c]
    }

    pub fn nominal_action(&self, state: &[f64]) -> Result<[f64; 2]> {
        let (r, c) = self
            .spec
            .cell_of(state)
            .ok_or_else(|| Error::Generation(format!("state {state:?} outside the maze")))?;
        let d = self.dist[r][c]
            .ok_or_else(|| Error::Generation(format!("waypoint {:?} unreachable from cell ({r}, {c})", self.goal_point)))?;
        let target = if (r, c) == self.goal_cell {
            self.goal_point
        } else {
            let next = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)]
                .iter()
                .map(|&(dr, dc)| (r as i64 + dr, c as i64 + dc))
                .find(|&(nr, nc)| {
                    !self.spec.is_wall(nr, nc) && self.dist[nr as usize][nc as usize] == Some(d - 1)
                })
                .expect("a reachable cell has a neighbor one step closer");
            [next.1 as f64 + 0.5, next.0 as f64 + 0.5]
        };
        let scale = self.spec.action_scale;
        Ok([
            ((target[0] - state[0]) / scale).clamp(-1.0, 1.0),
            ((target[1] - state[1]) / scale).clamp(-1.0, 1.0),
        ])
    }

    pub fn act<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<[f64; 2]> {
        let mut a = self.nominal_action(state)?;
        if self.noise > 0.0 {
            for x in a.iter_mut() {
                *x = (*x + rng.random_range(-self.noise..=self.noise)).clamp(-1.0, 1.0);
            }
        }
        Ok(a)
    }
}
