//! Closed-loop evaluation, the success matrix and continual-learning
//! metrics.

use crate::policy::{ActionChunk, Observation, PolicyModel};
use crate::tasks::expert::{committed_branch, expert_chunk, state_from_obs};
use crate::tasks::{env_step, observe, reset, success, Branch, TaskSpec};
use crate::train::ChunkSet;
use crate::{Error, Result, Rng};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Anything that maps a batch of observations to action chunks.
pub trait ChunkPolicy {
    /// Actions executed from each chunk before replanning.
    fn exec_horizon(&self) -> usize;

    /// One chunk per observation; row `i` draws its randomness from `rngs[i]`.
    fn act(&self, task: &TaskSpec, obs: &[Observation], rngs: &mut [Rng]) -> Result<Vec<ActionChunk>>;
}

impl ChunkPolicy for PolicyModel {
    fn exec_horizon(&self) -> usize {
        self.spec.exec_horizon
    }

    fn act(&self, _task: &TaskSpec, obs: &[Observation], rngs: &mut [Rng]) -> Result<Vec<ActionChunk>> {
        self.sample_chunks(obs, rngs, self.euler_steps)
    }
}

/// The scripted expert behind the same interface. Detours keep the side
/// they have committed to and otherwise pick one at random.
#[derive(Debug, Clone, Copy)]
pub struct ExpertPolicy {
    pub horizon: usize,
    pub exec_horizon: usize,
}

impl ChunkPolicy for ExpertPolicy {
    fn exec_horizon(&self) -> usize {
        self.exec_horizon
    }

    fn act(&self, task: &TaskSpec, obs: &[Observation], rngs: &mut [Rng]) -> Result<Vec<ActionChunk>> {
        obs.iter()
            .zip(rngs.iter_mut())
            .map(|(o, r)| {
                let state = state_from_obs(task, o);
                let branch = committed_branch(task, &state, 0.02).unwrap_or_else(|| Branch::draw(r));
                expert_chunk(task, &state, branch, self.horizon)
            })
            .collect()
    }
}

/// Always outputs zero actions.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPolicy {
    pub horizon: usize,
    pub exec_horizon: usize,
}

impl ChunkPolicy for ZeroPolicy {
    fn exec_horizon(&self) -> usize {
        self.exec_horizon
    }

    fn act(&self, _task: &TaskSpec, obs: &[Observation], _rngs: &mut [Rng]) -> Result<Vec<ActionChunk>> {
        obs.iter()
            .map(|_| ActionChunk::new(self.horizon, 2, vec![0.0; 2 * self.horizon]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub episodes: usize,
    pub successes: usize,
}

impl EvalResult {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.episodes as f64
    }
}

/// Success rate over `episodes` rollouts: `episodes / 2` seeded initial
/// configurations, each rolled out twice. Episode `e` draws its policy
/// noise from `seed ^ e`. Chunks are regenerated every `exec_horizon`
/// steps; an episode succeeds as soon as the goal is within tolerance.
pub fn evaluate(policy: &dyn ChunkPolicy, task: &TaskSpec, episodes: usize, seed: u64) -> Result<EvalResult> {
    if episodes == 0 || episodes % 2 != 0 {
        return Err(Error::Config("episode count must be even and positive".into()));
    }
    let h = policy.exec_horizon();
    if h == 0 {
        return Err(Error::Config("execution horizon must be >= 1".into()));
    }
    let configs = Rng::seed_from_u64(seed);
    let mut states: Vec<_> = (0..episodes)
        .map(|e| reset(task, &mut configs.fork((e / 2) as u64)))
        .collect();
    let mut rngs: Vec<Rng> = (0..episodes).map(|e| Rng::seed_from_u64(seed ^ e as u64)).collect();
    let mut done: Vec<Option<bool>> = vec![None; episodes];
    while done.iter().any(|d| d.is_none()) {
        let active: Vec<usize> = (0..episodes).filter(|&e| done[e].is_none()).collect();
        let obs: Vec<Observation> = active.iter().map(|&e| observe(task, &states[e])).collect();
        let mut batch_rngs: Vec<Rng> = active.iter().map(|&e| rngs[e].clone()).collect();
        let chunks = policy.act(task, &obs, &mut batch_rngs)?;
        for ((&e, r), chunk) in active.iter().zip(batch_rngs).zip(&chunks) {
            rngs[e] = r;
            for t in 0..h.min(chunk.horizon) {
                states[e] = env_step(&states[e], chunk.action(t));
                if success(task, &states[e]) {
                    done[e] = Some(true);
                    break;
                }
                if states[e].step >= task.horizon {
                    done[e] = Some(false);
                    break;
                }
            }
        }
    }
    Ok(EvalResult {
        episodes,
        successes: done.iter().filter(|d| **d == Some(true)).count(),
    })
}

/// Lower-triangular record of `r_{n|m}`: success on task `n` after
/// learning stages `1..=m`, for `m ≥ n` (0-based storage).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessMatrix {
    pub tasks: usize,
    /// `cells[n][m]`, `None` where not yet measured or `m < n`.
    pub cells: Vec<Vec<Option<f64>>>,
    pub episodes: usize,
}

impl SuccessMatrix {
    pub fn new(tasks: usize, episodes: usize) -> Self {
        SuccessMatrix {
            tasks,
            cells: vec![vec![None; tasks]; tasks],
            episodes,
        }
    }

    pub fn set(&mut self, task: usize, stage: usize, rate: f64) -> Result<()> {
        if task >= self.tasks || stage >= self.tasks || stage < task {
            return Err(Error::Config(alloc::format!("no cell ({task}, {stage})")));
        }
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Config(alloc::format!("success rate {rate} outside [0, 1]")));
        }
        self.cells[task][stage] = Some(rate);
        Ok(())
    }

    pub fn get(&self, task: usize, stage: usize) -> Option<f64> {
        self.cells.get(task)?.get(stage).copied().flatten()
    }

    /// Number of filled cells.
    pub fn filled(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_some()).count()
    }

    fn at(&self, n: usize, m: usize) -> Result<f64> {
        self.get(n, m).ok_or(Error::IncompleteMatrix { task: n, stage: m })
    }
}

/// AUC, FWT and NBT in percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub fwt: f64,
    pub nbt: f64,
}

/// Continual-learning metrics of a complete matrix. NBT is 0 for a single
/// task.
pub fn metrics(m: &SuccessMatrix) -> Result<Metrics> {
    let n_tasks = m.tasks;
    if n_tasks == 0 {
        return Err(Error::Empty { what: "success matrix" });
    }
    let nf = n_tasks as f64;
    let mut auc = 0.0;
    let mut fwt = 0.0;
    let mut nbt = 0.0;
    for n in 0..n_tasks {
        let diag = m.at(n, n)?;
        fwt += diag;
        let mut row = 0.0;
        let mut drop = 0.0;
        for k in n..n_tasks {
            let r = m.at(n, k)?;
            row += r;
            if k > n {
                drop += diag - r;
            }
        }
        auc += row / (n_tasks - n) as f64;
        if n + 1 < n_tasks {
            nbt += drop / (n_tasks - n - 1) as f64;
        }
    }
    let nbt = if n_tasks > 1 { nbt / (nf - 1.0) } else { 0.0 };
    Ok(Metrics {
        auc: 100.0 * auc / nf,
        fwt: 100.0 * fwt / nf,
        nbt: 100.0 * nbt,
    })
}

/// Adapter selection statistics of one task's data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingAudit {
    /// `histogram[l][a]`: rows routed to adapter `a` at layer `l`.
    pub histogram: Vec<Vec<usize>>,
    /// Adapter linked to the task's own discriminator, per layer.
    pub expected: Vec<usize>,
    /// Fraction of rows routed to the expected adapter, per layer.
    pub agreement: Vec<f64>,
}

impl RoutingAudit {
    pub fn mean_agreement(&self) -> f64 {
        self.agreement.iter().sum::<f64>() / self.agreement.len().max(1) as f64
    }
}

/// Routes every row of `data` autonomously and compares the choice with the
/// adapter linked to the discriminator of `stage` (1-based).
pub fn routing_audit(model: &PolicyModel, stage: usize, data: &ChunkSet, rng: &mut Rng) -> Result<RoutingAudit> {
    if stage == 0 || stage > model.stage {
        return Err(Error::Config(alloc::format!(
            "stage {stage} not learned (model at {})",
            model.stage
        )));
    }
    let routes = model.resolve_routes(&crate::policy::RoutingMode::Autonomous)?;
    let (obs, targets) = data.all()?;
    let trace = model.collect_features(&obs, &targets, rng, &routes)?;
    let mut histogram = Vec::new();
    let mut expected = Vec::new();
    let mut agreement = Vec::new();
    for (l, bank) in model.banks.iter().enumerate() {
        let want = bank.links[stage - 1];
        let mut hist = vec![0usize; bank.adapters.len()];
        let sel = &trace.selections[l];
        for a in sel.iter().flatten() {
            hist[*a] += 1;
        }
        let hits = sel.iter().filter(|s| **s == Some(want)).count();
        agreement.push(hits as f64 / sel.len().max(1) as f64);
        histogram.push(hist);
        expected.push(want);
    }
    Ok(RoutingAudit {
        histogram,
        expected,
        agreement,
    })
}
