//! Full fine-tuning baselines: sequential fine-tuning and experience replay.

use crate::data;
use crate::error::{CliError, CliResult};
use clare_core::optim::LrSchedule;
use clare_core::policy::{LayerRoute, ObsSpec, PolicyModel};
use clare_core::tasks::Dataset;
use clare_core::train::{train_flow, BatchSource, ChunkSet, TrainConfig, UniformSampler};
use clare_core::{Rng, Tensor};
use std::path::{Path, PathBuf};

/// Demonstrations of past tasks kept on disk, one dataset file per task.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    dir: PathBuf,
}

impl ReplayBuffer {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayBuffer { dir: dir.into() }
    }

    fn path(&self, task: usize) -> PathBuf {
        self.dir.join(format!("task_{task:03}.clds"))
    }

    pub fn insert(&self, ds: &Dataset, obs: &ObsSpec) -> CliResult<()> {
        data::write(&self.path(ds.task), ds, obs)
    }

    /// Every stored dataset, ordered by task id.
    pub fn load_all(&self) -> CliResult<Vec<Dataset>> {
        if !self.dir.exists() {
            return Ok(Vec::new());
        }
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&self.dir)
            .map_err(CliError::io(&self.dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("clds"))
            .collect();
        paths.sort();
        paths.iter().map(|p| data::read(p).map(|(ds, _)| ds)).collect()
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

/// Draws each row from the replay buffer with probability `fraction`,
/// otherwise from the current task. Counts where rows came from.
pub struct ReplayMix<'a> {
    current: UniformSampler<'a>,
    buffer: Option<UniformSampler<'a>>,
    fraction: f64,
    pub fresh_rows: u64,
    pub replayed_rows: u64,
}

impl<'a> ReplayMix<'a> {
    pub fn new(current: &'a ChunkSet, buffer: &'a [ChunkSet], fraction: f64) -> clare_core::Result<Self> {
        let buffer = if buffer.is_empty() {
            None
        } else {
            Some(UniformSampler::new(buffer.iter().collect())?)
        };
        Ok(ReplayMix {
            current: UniformSampler::new(vec![current])?,
            buffer,
            fraction,
            fresh_rows: 0,
            replayed_rows: 0,
        })
    }
}

impl BatchSource for ReplayMix<'_> {
    fn next_batch(&mut self, rng: &mut Rng, size: usize) -> clare_core::Result<(Tensor, Tensor)> {
        let mut obs = Vec::new();
        let mut targets = Vec::new();
        let mut shape = (0, 0);
        for _ in 0..size {
            let replay = self.buffer.is_some() && rng.uniform() < self.fraction;
            let (o, t) = match (&mut self.buffer, replay) {
                (Some(b), true) => {
                    self.replayed_rows += 1;
                    b.next_batch(rng, 1)?
                }
                _ => {
                    self.fresh_rows += 1;
                    self.current.next_batch(rng, 1)?
                }
            };
            shape = (o.cols(), t.cols());
            obs.extend_from_slice(o.data());
            targets.extend_from_slice(t.data());
        }
        Ok((
            Tensor::matrix(size, shape.0, obs)?,
            Tensor::matrix(size, shape.1, targets)?,
        ))
    }
}

/// Fine-tunes every backbone parameter on `source` with a cosine schedule.
pub fn finetune(
    model: &mut PolicyModel,
    source: &mut dyn BatchSource,
    steps: u64,
    batch_size: usize,
    lr: f64,
    rng: &mut Rng,
) -> clare_core::Result<Vec<f64>> {
    let params = model.base_params();
    let routes = vec![LayerRoute::Off; model.banks.len()];
    let cfg = TrainConfig {
        steps,
        batch_size,
        schedule: LrSchedule::Cosine { lr, total: steps },
    };
    train_flow(model, &params, &routes, source, &cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clare_core::policy::{ActionNormalizer, BackboneSpec};
    use clare_core::tasks::{collect_demos, generate_suite};

    fn sets() -> (BackboneSpec, Vec<ChunkSet>) {
        let spec = BackboneSpec::default();
        let suite = generate_suite(0, 8, 5).unwrap();
        let norm = ActionNormalizer::identity(2);
        let sets = suite
            .stream
            .iter()
            .take(3)
            .map(|t| ChunkSet::from_dataset(&collect_demos(t, 2, 0).unwrap(), &spec, &norm).unwrap())
            .collect();
        (spec, sets)
    }

    #[test]
    fn mix_follows_fraction() {
        let (_, sets) = sets();
        let mut mix = ReplayMix::new(&sets[0], &sets[1..], 0.5).unwrap();
        let mut rng = Rng::seed_from_u64(0);
        for _ in 0..100 {
            mix.next_batch(&mut rng, 32).unwrap();
        }
        let frac = mix.replayed_rows as f64 / 3200.0;
        assert!((frac - 0.5).abs() < 0.05, "{frac}");
    }

    #[test]
    fn empty_buffer_uses_current_task_only() {
        let (_, sets) = sets();
        let mut mix = ReplayMix::new(&sets[0], &[], 0.5).unwrap();
        let mut rng = Rng::seed_from_u64(0);
        mix.next_batch(&mut rng, 16).unwrap();
        assert_eq!((mix.fresh_rows, mix.replayed_rows), (16, 0));
    }

    #[test]
    fn buffer_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let buf = ReplayBuffer::new(dir.path().join("replay"));
        assert!(buf.load_all().unwrap().is_empty());
        let suite = generate_suite(0, 8, 5).unwrap();
        let a = collect_demos(&suite.stream[1], 2, 0).unwrap();
        let b = collect_demos(&suite.stream[0], 2, 0).unwrap();
        buf.insert(&a, &ObsSpec::default()).unwrap();
        buf.insert(&b, &ObsSpec::default()).unwrap();
        assert_eq!(buf.load_all().unwrap(), vec![b, a]);
    }
}
