//! Synthetic planar continual-imitation suite.
//!
//! A point robot moves in `[-1, 1]²` by bounded position deltas among three
//! landmarks. Tasks differ in which landmark matters and how it must be
//! approached; scripted experts provide demonstrations.

mod demos;
mod env;
pub(crate) mod expert;
mod suite;

pub use demos::{collect_demos, Dataset, Episode, DEMO_NOISE};
pub use env::{env_step, goal_distance, observe, reset, success, EnvState, ACTION_BOUND, GRASP_RADIUS};
pub use expert::{expert_action, expert_chunk, Branch};
pub use suite::{generate_suite, instruction_vector, Region, Suite, TaskKind, TaskSpec};

/// Success tolerance on the goal distance.
pub const TOLERANCE: f64 = 0.05;
/// Episode step limit.
pub const HORIZON: usize = 200;
/// Instruction embedding size.
pub const INSTRUCTION_DIM: usize = 16;
pub const NUM_LANDMARKS: usize = 3;
