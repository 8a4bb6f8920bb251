use super::env::{env_step, goal_distance, observe, reset, success};
use super::expert::{expert_action, Branch};
use super::{EnvState, TaskSpec};
use crate::policy::Observation;
use crate::{Error, Result, Rng};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// One successful expert rollout: `actions[t]` was taken after seeing
/// `observations[t]`, and the state after the last action satisfies the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub task: usize,
    pub initial: EnvState,
    pub branch: Branch,
    pub observations: Vec<Observation>,
    pub actions: Vec<[f64; 2]>,
    pub final_distance: f64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Action chunk starting at step `t`, padded past the end by repeating
    /// the final action. Flattened `horizon × 2`.
    pub fn window(&self, t: usize, horizon: usize) -> Vec<f64> {
        let last = self.actions.len() - 1;
        (0..horizon)
            .flat_map(|k| self.actions[(t + k).min(last)])
            .collect()
    }
}

/// Demonstrations of a single task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub task: usize,
    pub episodes: Vec<Episode>,
    /// Expert rollouts rejected while collecting.
    pub discarded: usize,
}

impl Dataset {
    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }
}

/// Standard deviation of the perturbation added to executed expert actions.
/// The recorded label stays the clean expert action, so the data covers
/// recoveries from states slightly off the expert's path.
pub const DEMO_NOISE: f64 = 0.02;
/// Demonstrations end once every expert action component is below this.
pub const SETTLE_ACTION: f64 = 0.005;

fn rollout(task: &TaskSpec, rng: &mut Rng) -> Option<Episode> {
    let initial = reset(task, rng);
    let branch = Branch::draw(rng);
    let mut s = initial.clone();
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    while !success(task, &s) {
        if s.step >= task.horizon {
            return None;
        }
        let a = expert_action(task, &s, branch);
        observations.push(observe(task, &s));
        actions.push(a);
        let executed = [a[0] + DEMO_NOISE * rng.normal(), a[1] + DEMO_NOISE * rng.normal()];
        s = env_step(&s, &executed);
    }
    // Settle on the goal so the last action, which pads chunk windows past
    // the end, is close to standing still.
    loop {
        let a = expert_action(task, &s, branch);
        if a.iter().all(|v| v.abs() < SETTLE_ACTION) || s.step >= task.horizon {
            break;
        }
        observations.push(observe(task, &s));
        actions.push(a);
        s = env_step(&s, &a);
    }
    if !success(task, &s) {
        return None;
    }
    if actions.is_empty() {
        // Started inside the goal; nothing to imitate.
        return None;
    }
    Some(Episode {
        task: task.id,
        initial,
        branch,
        observations,
        actions,
        final_distance: goal_distance(task, &s),
    })
}

/// `count` successful expert episodes. Failed rollouts are redrawn; more
/// failures than requested episodes marks the task as malformed.
pub fn collect_demos(task: &TaskSpec, count: usize, seed: u64) -> Result<Dataset> {
    let base = Rng::seed_from_u64(seed ^ 0xDE30_0000).fork(task.id as u64);
    let mut episodes = Vec::with_capacity(count);
    let mut discarded = 0;
    let mut attempt = 0u64;
    while episodes.len() < count {
        let mut rng = base.fork(attempt);
        attempt += 1;
        match rollout(task, &mut rng) {
            Some(e) => episodes.push(e),
            None => {
                discarded += 1;
                if discarded > count.max(1) {
                    return Err(Error::MalformedTask {
                        task: task.id,
                        failures: discarded,
                        attempts: attempt as usize,
                    });
                }
            }
        }
    }
    Ok(Dataset {
        task: task.id,
        episodes,
        discarded,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{generate_suite, TaskKind, TOLERANCE};
    use super::*;
    use crate::math::norm;

    #[test]
    fn fifty_successful_episodes() {
        let suite = generate_suite(0, 8, 5).unwrap();
        for task in suite.all() {
            let ds = collect_demos(task, 50, 1).unwrap();
            assert_eq!(ds.episodes.len(), 50);
            for e in &ds.episodes {
                assert!(e.final_distance <= TOLERANCE);
                assert!(e.actions.iter().all(|a| a.iter().all(|v| v.abs() <= 0.1)));
                // labels are the clean expert action at the visited state
                for (o, a) in e.observations.iter().zip(&e.actions) {
                    let s = super::super::expert::state_from_obs(task, o);
                    assert_eq!(expert_action(task, &s, e.branch), *a);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let suite = generate_suite(0, 8, 5).unwrap();
        let a = collect_demos(&suite.stream[0], 10, 5).unwrap();
        let b = collect_demos(&suite.stream[0], 10, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, collect_demos(&suite.stream[0], 10, 6).unwrap());
    }

    #[test]
    fn windows_cover_every_step_with_padding() {
        let suite = generate_suite(0, 8, 5).unwrap();
        let ds = collect_demos(&suite.pretrain[0], 3, 0).unwrap();
        let e = &ds.episodes[0];
        let windows: Vec<Vec<f64>> = (0..e.len()).map(|t| e.window(t, 16)).collect();
        assert_eq!(windows.len(), e.len());
        let last = e.actions[e.len() - 1];
        let tail = &windows[e.len() - 1];
        assert!(tail.chunks(2).all(|a| a == last));
        assert_eq!(&windows[0][..2], &e.actions[0]);
    }

    #[test]
    fn detour_branches_are_spatially_distinct() {
        let suite = generate_suite(0, 8, 5).unwrap();
        let task = suite.stream.iter().find(|t| t.kind == TaskKind::Detour).unwrap();
        let ds = collect_demos(task, 50, 2).unwrap();
        // mean robot position at the episode midpoint, per branch
        let mut sums = [[0.0f64; 2]; 2];
        let mut counts = [0usize; 2];
        for e in &ds.episodes {
            let mid = &e.observations[e.len() / 2];
            let k = matches!(e.branch, Branch::Left) as usize;
            sums[k][0] += mid.proprio[0];
            sums[k][1] += mid.proprio[1];
            counts[k] += 1;
        }
        assert!(counts[0] > 0 && counts[1] > 0);
        let m: Vec<[f64; 2]> = (0..2)
            .map(|k| [sums[k][0] / counts[k] as f64, sums[k][1] / counts[k] as f64])
            .collect();
        let gap = norm(&[m[0][0] - m[1][0], m[0][1] - m[1][1]]);
        assert!(gap > 0.3, "branch midpoint gap {gap}");
    }
}
