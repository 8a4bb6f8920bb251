use super::{HORIZON, INSTRUCTION_DIM, NUM_LANDMARKS, TOLERANCE};
use crate::math::{dot, norm};
use crate::{Error, Result, Rng};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Straight to the target landmark.
    Reach,
    /// Align the x coordinate with the target first, then move along y.
    TraceL,
    /// Pick up the target landmark and carry it to the destination landmark.
    PushProxy,
    /// Pass the obstacle landmark on either side (chosen per episode).
    Detour,
}

/// Axis-aligned box sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub center: [f64; 2],
    pub half: [f64; 2],
}

impl Region {
    pub fn new(center: [f64; 2], half: f64) -> Self {
        Region {
            center,
            half: [half, half],
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> [f64; 2] {
        [
            rng.range(self.center[0] - self.half[0], self.center[0] + self.half[0]),
            rng.range(self.center[1] - self.half[1], self.center[1] + self.half[1]),
        ]
    }
}

/// A task: initial-state distribution, instruction and success condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub kind: TaskKind,
    pub start: Region,
    pub landmarks: Vec<Region>,
    /// Goal landmark, or the object to carry for push tasks.
    pub target: usize,
    /// Where a push task delivers its object.
    pub destination: Option<usize>,
    /// Landmark to go around for detour tasks.
    pub obstacle: Option<usize>,
    pub instruction: Vec<f64>,
    pub tolerance: f64,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub seed: u64,
    pub pretrain: Vec<TaskSpec>,
    pub stream: Vec<TaskSpec>,
}

impl Suite {
    pub fn all(&self) -> impl Iterator<Item = &TaskSpec> {
        self.pretrain.iter().chain(&self.stream)
    }
}

const MAX_INSTRUCTION_COSINE: f64 = 0.9;

/// Unit instruction vector for task `id`; attempt `k` re-draws it.
pub fn instruction_vector(seed: u64, id: usize, attempt: u64) -> Vec<f64> {
    let mut rng = Rng::seed_from_u64(seed ^ 0x1A57_0000).fork(((id as u64) << 16) | attempt);
    let mut v = vec![0.0; INSTRUCTION_DIM];
    rng.fill_normal(&mut v, 1.0);
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

struct Layout {
    landmarks: [[f64; 2]; NUM_LANDMARKS],
    start: [f64; 2],
}

// Pretraining layouts.
const P1: Layout = Layout {
    landmarks: [[0.6, 0.5], [0.5, -0.6], [-0.5, 0.6]],
    start: [-0.5, -0.5],
};
const P2: Layout = Layout {
    landmarks: [[-0.6, -0.2], [0.0, 0.7], [0.6, -0.1]],
    start: [0.0, -0.6],
};
// Stream layouts; S1 and S3 put landmark 1 between start and landmark 0.
const S1: Layout = Layout {
    landmarks: [[0.7, 0.0], [0.0, 0.0], [0.0, 0.7]],
    start: [-0.7, 0.0],
};
const S2: Layout = Layout {
    landmarks: [[-0.6, 0.6], [0.6, 0.6], [0.3, -0.7]],
    start: [-0.2, -0.3],
};
const S3: Layout = Layout {
    landmarks: [[0.0, 0.75], [0.0, 0.0], [-0.7, -0.5]],
    start: [0.0, -0.7],
};

struct Blueprint {
    kind: TaskKind,
    layout: &'static Layout,
    target: usize,
    second: Option<usize>,
}

const fn bp(kind: TaskKind, layout: &'static Layout, target: usize, second: Option<usize>) -> Blueprint {
    Blueprint {
        kind,
        layout,
        target,
        second,
    }
}

const PRETRAIN: [Blueprint; 8] = [
    bp(TaskKind::Reach, &P1, 0, None),
    bp(TaskKind::Reach, &P1, 1, None),
    bp(TaskKind::TraceL, &P1, 2, None),
    bp(TaskKind::PushProxy, &P2, 0, Some(1)),
    bp(TaskKind::Reach, &P2, 2, None),
    bp(TaskKind::TraceL, &P2, 0, None),
    bp(TaskKind::PushProxy, &P1, 1, Some(2)),
    bp(TaskKind::TraceL, &P2, 1, None),
];

const STREAM: [Blueprint; 5] = [
    bp(TaskKind::Detour, &S1, 0, Some(1)),
    bp(TaskKind::Reach, &S2, 2, None),
    bp(TaskKind::PushProxy, &S2, 0, Some(1)),
    bp(TaskKind::Detour, &S3, 0, Some(1)),
    bp(TaskKind::TraceL, &S1, 2, None),
];

const LANDMARK_JITTER: f64 = 0.08;
const START_JITTER: f64 = 0.1;
const LAYOUT_SHIFT: f64 = 0.05;

fn make_task(id: usize, b: &Blueprint, rng: &mut Rng) -> TaskSpec {
    let mut shift = || [rng.range(-LAYOUT_SHIFT, LAYOUT_SHIFT), rng.range(-LAYOUT_SHIFT, LAYOUT_SHIFT)];
    let landmarks = b
        .layout
        .landmarks
        .iter()
        .map(|c| {
            let s = shift();
            Region::new([c[0] + s[0], c[1] + s[1]], LANDMARK_JITTER)
        })
        .collect();
    let s = shift();
    let start = Region::new([b.layout.start[0] + s[0], b.layout.start[1] + s[1]], START_JITTER);
    TaskSpec {
        id,
        kind: b.kind,
        start,
        landmarks,
        target: b.target,
        destination: matches!(b.kind, TaskKind::PushProxy).then(|| b.second.unwrap_or(0)),
        obstacle: matches!(b.kind, TaskKind::Detour).then(|| b.second.unwrap_or(0)),
        instruction: Vec::new(),
        tolerance: TOLERANCE,
        horizon: HORIZON,
    }
}

/// Deterministic pretraining set and continual stream. Blueprints cycle when
/// more tasks are requested than the built-in lists hold. Instructions are
/// redrawn until every pair has cosine similarity below 0.9.
pub fn generate_suite(seed: u64, n_pretrain: usize, n_stream: usize) -> Result<Suite> {
    if n_pretrain == 0 || n_stream == 0 {
        return Err(Error::Config("task counts must be >= 1".into()));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut pretrain = Vec::with_capacity(n_pretrain);
    for i in 0..n_pretrain {
        pretrain.push(make_task(i, &PRETRAIN[i % PRETRAIN.len()], &mut rng));
    }
    let mut stream = Vec::with_capacity(n_stream);
    for i in 0..n_stream {
        stream.push(make_task(n_pretrain + i, &STREAM[i % STREAM.len()], &mut rng));
    }
    let mut accepted: Vec<Vec<f64>> = Vec::new();
    for task in pretrain.iter_mut().chain(stream.iter_mut()) {
        let mut attempt = 0u64;
        let v = loop {
            let v = instruction_vector(seed, task.id, attempt);
            if accepted.iter().all(|u| dot(u, &v) < MAX_INSTRUCTION_COSINE) {
                break v;
            }
            attempt += 1;
        };
        accepted.push(v.clone());
        task.instruction = v;
    }
    Ok(Suite {
        seed,
        pretrain,
        stream,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(generate_suite(3, 8, 5).unwrap(), generate_suite(3, 8, 5).unwrap());
        assert_ne!(generate_suite(3, 8, 5).unwrap(), generate_suite(4, 8, 5).unwrap());
    }

    #[test]
    fn stream_has_distinct_ids_and_instructions() {
        let s = generate_suite(0, 8, 5).unwrap();
        assert_eq!(s.stream.len(), 5);
        for (i, a) in s.stream.iter().enumerate() {
            for b in &s.stream[i + 1..] {
                assert_ne!(a.id, b.id);
                assert_ne!(a.instruction, b.instruction);
            }
        }
    }

    #[test]
    fn instructions_are_unit_and_dissimilar() {
        for seed in 0..20 {
            let s = generate_suite(seed, 8, 5).unwrap();
            let all: Vec<&TaskSpec> = s.all().collect();
            for (i, a) in all.iter().enumerate() {
                assert!((norm(&a.instruction) - 1.0).abs() < 1e-12);
                for b in &all[i + 1..] {
                    assert!(dot(&a.instruction, &b.instruction) < 0.9);
                }
            }
        }
    }

    #[test]
    fn stream_exercises_expand_and_link_paths() {
        let s = generate_suite(0, 8, 5).unwrap();
        let kinds: Vec<TaskKind> = s.stream.iter().map(|t| t.kind).collect();
        let shared = (0..kinds.len()).any(|i| (i + 1..kinds.len()).any(|j| kinds[i] == kinds[j]));
        let distinct = kinds.iter().any(|k| *k != kinds[0]);
        assert!(shared && distinct);
        // the stream introduces a kind absent from pretraining
        assert!(kinds.iter().any(|k| s.pretrain.iter().all(|p| p.kind != *k)));
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(generate_suite(0, 0, 5).is_err());
        assert!(generate_suite(0, 8, 0).is_err());
    }
}
