use super::{TaskKind, TaskSpec, NUM_LANDMARKS};
use crate::math::norm;
use crate::policy::Observation;
use crate::Rng;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Per-dimension bound on a position-delta action.
pub const ACTION_BOUND: f64 = 0.1;
/// Distance at which the robot picks up the object of a push task.
pub const GRASP_RADIUS: f64 = 0.2;
const BOUND: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub pos: [f64; 2],
    /// Displacement of the last step.
    pub vel: [f64; 2],
    pub landmarks: Vec<[f64; 2]>,
    /// Landmark that attaches to the robot on contact, if any.
    pub graspable: Option<usize>,
    pub attached: bool,
    pub step: usize,
}

fn clamp(v: f64, b: f64) -> f64 {
    v.clamp(-b, b)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    norm(&[a[0] - b[0], a[1] - b[1]])
}

/// Samples an initial state from the task's initial distribution.
pub fn reset(task: &TaskSpec, rng: &mut Rng) -> EnvState {
    let landmarks = task.landmarks.iter().map(|r| r.sample(rng)).collect();
    let pos = task.start.sample(rng);
    EnvState {
        pos,
        vel: [0.0; 2],
        landmarks,
        graspable: matches!(task.kind, TaskKind::PushProxy).then_some(task.target),
        attached: false,
        step: 0,
    }
}

/// Applies a clipped position delta; positions saturate at the workspace
/// boundary. An attached object moves with the robot.
pub fn env_step(state: &EnvState, action: &[f64]) -> EnvState {
    let mut next = state.clone();
    let a = [clamp(action[0], ACTION_BOUND), clamp(action[1], ACTION_BOUND)];
    for d in 0..2 {
        next.pos[d] = clamp(state.pos[d] + a[d], BOUND);
        next.vel[d] = next.pos[d] - state.pos[d];
    }
    if let Some(k) = next.graspable {
        if !next.attached && dist(next.pos, next.landmarks[k]) <= GRASP_RADIUS {
            next.attached = true;
        }
        if next.attached {
            next.landmarks[k] = next.pos;
        }
    }
    next.step += 1;
    next
}

/// Distance of the task-relevant point to its goal.
pub fn goal_distance(task: &TaskSpec, state: &EnvState) -> f64 {
    match task.kind {
        TaskKind::PushProxy => {
            let dest = state.landmarks[task.destination.unwrap_or(task.target)];
            if state.attached {
                dist(state.landmarks[task.target], dest)
            } else {
                f64::INFINITY
            }
        }
        _ => dist(state.pos, state.landmarks[task.target]),
    }
}

pub fn success(task: &TaskSpec, state: &EnvState) -> bool {
    goal_distance(task, state) <= task.tolerance
}

pub fn observe(task: &TaskSpec, state: &EnvState) -> Observation {
    let mut context = Vec::with_capacity(2 * NUM_LANDMARKS);
    for l in &state.landmarks {
        context.extend_from_slice(l);
    }
    Observation {
        proprio: alloc::vec![
            state.pos[0],
            state.pos[1],
            if state.attached { 1.0 } else { 0.0 },
        ],
        context,
        instruction: task.instruction.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn origin() -> EnvState {
        EnvState {
            pos: [0.0, 0.0],
            vel: [0.0, 0.0],
            landmarks: vec![[0.5, 0.5]; 3],
            graspable: None,
            attached: false,
            step: 0,
        }
    }

    #[test]
    fn zero_action_keeps_position() {
        let s = env_step(&origin(), &[0.0, 0.0]);
        assert_eq!(s.pos, [0.0, 0.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn unit_step() {
        assert_eq!(env_step(&origin(), &[0.1, 0.0]).pos, [0.1, 0.0]);
    }

    #[test]
    fn actions_are_clipped() {
        assert_eq!(env_step(&origin(), &[0.7, -3.0]).pos, [0.1, -0.1]);
    }

    #[test]
    fn saturates_at_workspace_bound() {
        // scalar oracle: x_{k+1} = min(x_k + 0.05, 1), twenty steps from 0
        let mut x = 0.0f64;
        for _ in 0..20 {
            x = (x + 0.05).min(1.0);
        }
        let mut s = origin();
        for _ in 0..20 {
            s = env_step(&s, &[0.05, 0.0]);
        }
        assert_eq!(s.pos, [x.min(1.0), 0.0]);
        assert!((s.pos[0] - 1.0).abs() < 1e-12);
        s = env_step(&s, &[0.05, 0.0]);
        assert_eq!(s.pos[0], 1.0);
    }

    #[test]
    fn grasped_object_follows_robot() {
        let mut s = origin();
        s.graspable = Some(1);
        s.landmarks[1] = [0.04, 0.0];
        s = env_step(&s, &[0.01, 0.0]);
        assert!(s.attached);
        s = env_step(&s, &[0.1, 0.1]);
        assert_eq!(s.landmarks[1], s.pos);
        assert_eq!(s.landmarks[0], [0.5, 0.5]);
    }
}
