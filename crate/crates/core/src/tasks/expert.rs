use super::env::{env_step, ACTION_BOUND};
use super::{EnvState, TaskKind, TaskSpec};
use crate::math::norm;
use crate::policy::{ActionChunk, Observation};
use crate::{Result, Rng};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Proportional gain of the scripted controllers.
const GAIN: f64 = 0.5;
/// Lateral offset of the detour waypoint from the obstacle.
const DETOUR_OFFSET: f64 = 0.3;
/// Along-track overshoot of the detour waypoint past the obstacle.
const DETOUR_LEAD: f64 = 0.06;
const ALIGN_TOL: f64 = 0.02;

/// Side on which a detour passes its obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Left,
    Right,
}

impl Branch {
    pub fn draw(rng: &mut Rng) -> Self {
        if rng.coin() {
            Branch::Left
        } else {
            Branch::Right
        }
    }

    fn sign(self) -> f64 {
        match self {
            Branch::Left => 1.0,
            Branch::Right => -1.0,
        }
    }
}

fn toward(pos: [f64; 2], target: [f64; 2]) -> [f64; 2] {
    [
        (GAIN * (target[0] - pos[0])).clamp(-ACTION_BOUND, ACTION_BOUND),
        (GAIN * (target[1] - pos[1])).clamp(-ACTION_BOUND, ACTION_BOUND),
    ]
}

/// Point the detour controller steers at from `pos`.
pub(crate) fn detour_waypoint(task: &TaskSpec, state: &EnvState, branch: Branch) -> [f64; 2] {
    let goal = state.landmarks[task.target];
    let obstacle = state.landmarks[task.obstacle.unwrap_or(task.target)];
    let d = [goal[0] - obstacle[0], goal[1] - obstacle[1]];
    let n = norm(&d).max(1e-12);
    let dir = [d[0] / n, d[1] / n];
    let along = (state.pos[0] - obstacle[0]) * dir[0] + (state.pos[1] - obstacle[1]) * dir[1];
    if along < 0.0 {
        let perp = [-dir[1], dir[0]];
        let s = branch.sign() * DETOUR_OFFSET;
        [
            obstacle[0] + s * perp[0] + DETOUR_LEAD * dir[0],
            obstacle[1] + s * perp[1] + DETOUR_LEAD * dir[1],
        ]
    } else {
        goal
    }
}

/// Scripted expert action. `branch` only matters for detours.
pub fn expert_action(task: &TaskSpec, state: &EnvState, branch: Branch) -> [f64; 2] {
    let pos = state.pos;
    let target = match task.kind {
        TaskKind::Reach => state.landmarks[task.target],
        TaskKind::TraceL => {
            let g = state.landmarks[task.target];
            if (pos[0] - g[0]).abs() > ALIGN_TOL {
                [g[0], pos[1]]
            } else {
                g
            }
        }
        TaskKind::PushProxy => {
            if state.attached {
                state.landmarks[task.destination.unwrap_or(task.target)]
            } else {
                state.landmarks[task.target]
            }
        }
        TaskKind::Detour => detour_waypoint(task, state, branch),
    };
    toward(pos, target)
}

/// Expert plan of `horizon` actions obtained by simulating the
/// (deterministic) environment forward from `state`.
pub fn expert_chunk(
    task: &TaskSpec,
    state: &EnvState,
    branch: Branch,
    horizon: usize,
) -> Result<ActionChunk> {
    let mut s = state.clone();
    let mut data = Vec::with_capacity(2 * horizon);
    for _ in 0..horizon {
        let a = expert_action(task, &s, branch);
        data.extend_from_slice(&a);
        s = env_step(&s, &a);
    }
    ActionChunk::new(horizon, 2, data)
}

/// Side of the obstacle the robot is already committed to, if it has left
/// the straight line by more than `margin`.
pub(crate) fn committed_branch(task: &TaskSpec, state: &EnvState, margin: f64) -> Option<Branch> {
    let obstacle = task.obstacle?;
    let goal = state.landmarks[task.target];
    let o = state.landmarks[obstacle];
    let d = [goal[0] - o[0], goal[1] - o[1]];
    let n = norm(&d).max(1e-12);
    let lateral = (-(d[1]) * (state.pos[0] - o[0]) + d[0] * (state.pos[1] - o[1])) / n;
    if lateral > margin {
        Some(Branch::Left)
    } else if lateral < -margin {
        Some(Branch::Right)
    } else {
        None
    }
}

/// Rebuilds the environment state visible in an observation.
pub(crate) fn state_from_obs(task: &TaskSpec, obs: &Observation) -> EnvState {
    let landmarks: Vec<[f64; 2]> = obs.context.chunks(2).map(|c| [c[0], c[1]]).collect();
    let pos = [obs.proprio[0], obs.proprio[1]];
    let graspable = matches!(task.kind, TaskKind::PushProxy).then_some(task.target);
    let attached = graspable.is_some() && obs.proprio[2] > 0.5;
    EnvState {
        pos,
        vel: [0.0; 2],
        landmarks,
        graspable,
        attached,
        step: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::super::{generate_suite, reset, success};
    use super::*;

    #[test]
    fn at_goal_action_is_zero() {
        let suite = generate_suite(0, 8, 5).unwrap();
        let task = &suite.pretrain[0];
        let mut rng = Rng::seed_from_u64(0);
        let mut s = reset(task, &mut rng);
        s.pos = s.landmarks[task.target];
        let a = expert_action(task, &s, Branch::Left);
        assert!(norm(&a) < 1e-3);
    }

    fn rollout(task: &TaskSpec, seed: u64) -> (bool, Vec<[f64; 2]>, Branch) {
        let mut rng = Rng::seed_from_u64(seed);
        let mut s = reset(task, &mut rng);
        let branch = Branch::draw(&mut rng);
        let mut path = alloc::vec![s.pos];
        for _ in 0..task.horizon {
            if success(task, &s) {
                return (true, path, branch);
            }
            s = env_step(&s, &expert_action(task, &s, branch));
            path.push(s.pos);
        }
        (success(task, &s), path, branch)
    }

    #[test]
    fn expert_always_succeeds() {
        let suite = generate_suite(1, 8, 5).unwrap();
        for task in suite.all() {
            for seed in 0..100 {
                assert!(rollout(task, seed).0, "task {} seed {seed}", task.id);
            }
        }
    }

    #[test]
    fn detour_is_bimodal() {
        let suite = generate_suite(0, 8, 5).unwrap();
        let task = suite.stream.iter().find(|t| t.kind == TaskKind::Detour).unwrap();
        let (mut left, mut right) = (0, 0);
        for seed in 0..100 {
            match rollout(task, seed).2 {
                Branch::Left => left += 1,
                Branch::Right => right += 1,
            }
        }
        assert!(left >= 30 && right >= 30, "{left} / {right}");
    }

    #[test]
    fn chunk_matches_closed_loop_rollout() {
        let suite = generate_suite(2, 8, 5).unwrap();
        let task = &suite.pretrain[3];
        let mut rng = Rng::seed_from_u64(9);
        let s0 = reset(task, &mut rng);
        let chunk = expert_chunk(task, &s0, Branch::Right, 16).unwrap();
        let mut s = s0.clone();
        for t in 0..16 {
            let a = expert_action(task, &s, Branch::Right);
            assert_eq!(chunk.action(t), &a);
            s = env_step(&s, &a);
        }
    }
}
