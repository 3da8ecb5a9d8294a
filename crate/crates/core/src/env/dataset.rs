use std::ops::Range;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::controller::WaypointController;
use super::maze::{MazeLayout, PointMazeSpec, Region};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Goal reached: the value of `next_state` is not bootstrapped.
    pub done: bool,
    /// Discounted reward-to-go within the episode, filled by [`annotate_mc_returns`].
    pub mc_return: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoverageTag {
    /// Random starts and goals, heavy action noise.
    Diverse,
    /// A few fixed routes, light action noise.
    Play,
}

impl CoverageTag {
    pub fn code(self) -> u8 {
        match self {
            CoverageTag::Diverse => 0,
            CoverageTag::Play => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(CoverageTag::Diverse),
            1 => Some(CoverageTag::Play),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CoverageTag::Diverse => "diverse",
            CoverageTag::Play => "play",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub transitions: Vec<Transition>,
    pub episodes: Vec<Range<usize>>,
    pub coverage_tag: CoverageTag,
    /// Discount used for `mc_return`; 0 until annotated.
    pub discount: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn d_state(&self) -> usize {
        self.transitions.first().map_or(0, |t| t.state.len())
    }

    pub fn d_action(&self) -> usize {
        self.transitions.first().map_or(0, |t| t.action.len())
    }

    /// Checks that episodes tile the transition list in order and that terminal
    /// transitions only appear at episode ends.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for ep in &self.episodes {
            if ep.start != next || ep.end <= ep.start {
                return Err(Error::Format(format!("episode {ep:?} does not continue at {next}")));
            }
            if self.transitions[ep.start..ep.end - 1].iter().any(|t| t.done) {
                return Err(Error::Format(format!("terminal transition inside episode {ep:?}")));
            }
            next = ep.end;
        }
        if next != self.transitions.len() {
            return Err(Error::Format("episodes do not cover every transition".into()));
        }
        Ok(())
    }

    /// Fraction of `bins x bins` cells over `[-1, 1]^2` hit by at least one action
    /// (first two action dimensions).
    pub fn action_coverage(&self, bins: usize) -> f64 {
        let mut hit = vec![false; bins * bins];
        let idx = |a: f64| (((a + 1.0) * 0.5 * bins as f64).floor() as usize).min(bins - 1);
        for t in &self.transitions {
            hit[idx(t.action[0]) * bins + idx(t.action[1])] = true;
        }
        hit.iter().filter(|&&h| h).count() as f64 / (bins * bins) as f64
    }

    pub fn success_fraction(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        let succ = self.episodes.iter().filter(|ep| self.transitions[ep.end - 1].done).count();
        succ as f64 / self.episodes.len() as f64
    }
}

/// Hand-picked `(start cell, goal cell)` routes used by the play regime.
pub fn play_routes(spec: &PointMazeSpec) -> Vec<((usize, usize), (usize, usize))> {
    let start = spec.cell_of(&spec.start_region.center()).expect("start inside grid");
    let goal = spec.cell_of(&spec.goal_region.center()).expect("goal inside grid");
    let (rows, cols) = (spec.rows(), spec.cols());
    // Meeting points roughly halfway; the task route has to be stitched from two pieces.
    let mid = if rows == MazeLayout::Large.spec().rows() { (4, 4) } else { (2, 2) };
    let far_corner = (rows - 1, 0);
    let other_corner = (0, cols - 1);
    vec![(start, mid), (mid, goal), (far_corner, mid), (other_corner, goal)]
        .into_iter()
        .filter(|&((r0, c0), (r1, c1))| !spec.grid[r0][c0] && !spec.grid[r1][c1])
        .collect()
}

fn inner_cell(row: usize, col: usize) -> Region {
    Region::new([col as f64 + 0.1, row as f64 + 0.1], [col as f64 + 0.9, row as f64 + 0.9])
}

/// Runs one controller episode from `start` toward `waypoint`. The episode ends when
/// the task goal is entered (terminal), the waypoint is reached, or the step limit hits.
fn controller_episode(
    spec: &PointMazeSpec,
    start: Vec<f64>,
    waypoint: [f64; 2],
    noise: f64,
    rng: &mut impl Rng,
    out: &mut Vec<Transition>,
) -> Result<bool> {
    let ctrl = WaypointController::new(spec, waypoint, noise)?;
    let mut state = start;
    let arrive = spec.action_scale * 0.5;
    for t in 0..spec.max_episode_steps {
        let action = ctrl.act(&state, rng)?;
        let step = spec.step(&state, &action, t)?;
        let reached = ((step.next_state[0] - waypoint[0]).powi(2) + (step.next_state[1] - waypoint[1]).powi(2))
            .sqrt()
            < arrive;
        out.push(Transition {
            state: std::mem::take(&mut state),
            action: action.to_vec(),
            reward: step.reward,
            next_state: step.next_state.clone(),
            done: step.terminal,
            mc_return: 0.0,
        });
        if step.terminal {
            return Ok(true);
        }
        if reached || step.truncated {
            return Ok(false);
        }
        state = step.next_state;
    }
    Ok(false)
}

/// Generates an offline dataset with the scripted controller. Deterministic in `seed`.
pub fn generate_dataset(
    spec: &PointMazeSpec,
    regime: CoverageTag,
    n_episodes: usize,
    noise_level: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be at least 1".into()));
    }
    if !(0.0..=2.0).contains(&noise_level) {
        return Err(Error::Config(format!("noise level {noise_level} outside [0, 2]")));
    }
    spec.validate()?;
    let free = spec.free_cells();
    let routes = play_routes(spec);
    let mut transitions = Vec::new();
    let mut episodes = Vec::with_capacity(n_episodes);
    for ep in 0..n_episodes {
        let mut rng = stream(seed, &[tag::DATASET, ep as u64]);
        let (start_cell, goal_cell) = match regime {
            CoverageTag::Diverse => {
                let s = *free.choose(&mut rng).expect("maze has free cells");
                let g = loop {
                    let g = *free.choose(&mut rng).unwrap();
                    if g != s || free.len() == 1 {
                        break g;
                    }
                };
                (s, g)
            }
            CoverageTag::Play => *routes.choose(&mut rng).expect("maze has play routes"),
        };
        let start = match regime {
            CoverageTag::Diverse => inner_cell(start_cell.0, start_cell.1).sample(&mut rng),
            CoverageTag::Play => Region::cell_core(start_cell.0, start_cell.1).sample(&mut rng),
        };
        if spec.goal_region.contains(&start) {
            // starting inside the absorbing goal carries no information
            continue;
        }
        let waypoint = [goal_cell.1 as f64 + 0.5, goal_cell.0 as f64 + 0.5];
        let begin = transitions.len();
        controller_episode(spec, start.to_vec(), waypoint, noise_level, &mut rng, &mut transitions)?;
        episodes.push(begin..transitions.len());
    }
    if episodes.is_empty() {
        return Err(Error::Generation("every sampled episode started inside the goal".into()));
    }
    Ok(Dataset { transitions, episodes, coverage_tag: regime, discount: 0.0 })
}

/// Success rate of the noisy controller driving from the task start to the task goal.
pub fn behavior_success_rate(spec: &PointMazeSpec, noise_level: f64, n_episodes: usize, seed: u64) -> Result<f64> {
    let mut successes = 0;
    let mut scratch = Vec::new();
    for ep in 0..n_episodes {
        let mut rng = stream(seed, &[tag::BEHAVIOR, ep as u64]);
        let start = spec.reset(&mut rng);
        scratch.clear();
        if controller_episode(spec, start, spec.goal_region.center(), noise_level, &mut rng, &mut scratch)? {
            successes += 1;
        }
    }
    Ok(successes as f64 / n_episodes.max(1) as f64)
}

/// Fills `mc_return` with the discounted reward-to-go inside each episode.
pub fn annotate_mc_returns(mut dataset: Dataset, discount: f64) -> Dataset {
    for ep in &dataset.episodes {
        let mut acc = 0.0;
        for t in dataset.transitions[ep.clone()].iter_mut().rev() {
            acc = t.reward + discount * acc;
            t.mc_return = acc;
        }
    }
    dataset.discount = discount;
    dataset
}

pub fn mc_returns_for(transitions: &mut [Transition], discount: f64) {
    let mut acc = 0.0;
    for t in transitions.iter_mut().rev() {
        acc = t.reward + discount * acc;
        t.mc_return = acc;
    }
}

/// Shifts every reward by `bias`; the result must be non-positive everywhere.
pub fn bias_rewards(mut dataset: Dataset, bias: f64) -> Result<Dataset> {
    let max = dataset.transitions.iter().map(|t| t.reward + bias).fold(f64::NEG_INFINITY, f64::max);
    if max > 0.0 {
        return Err(Error::Config(format!("reward bias {bias} leaves a positive reward {max}")));
    }
    for t in dataset.transitions.iter_mut() {
        t.reward += bias;
    }
    Ok(dataset)
}
