//! Point-maze environment and offline dataset generation.

mod controller;
mod dataset;
pub mod io;
mod maze;

pub use controller::WaypointController;
pub use dataset::{
    annotate_mc_returns, behavior_success_rate, bias_rewards, generate_dataset, mc_returns_for, play_routes,
    CoverageTag, Dataset, Transition,
};
pub use maze::{MazeLayout, PointMazeSpec, Region, StepOutcome, WALL_MARGIN};
