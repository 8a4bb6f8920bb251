//! Flow-matching training loop shared by pretraining, adapter training and
//! the full fine-tuning baselines.

use crate::optim::{Adam, LrSchedule};
use crate::params::{ParamId, Session, TrainMask};
use crate::policy::{ActionNormalizer, BackboneSpec, LayerRoute, PolicyModel};
use crate::tasks::Dataset;
use crate::tensor::Tensor;
use crate::{Error, Result, Rng};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Sliding-window training pairs of one dataset: observation rows and
/// normalized action-chunk targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkSet {
    pub task: usize,
    obs_dim: usize,
    chunk_dim: usize,
    obs: Vec<f64>,
    targets: Vec<f64>,
}

impl ChunkSet {
    /// One window per recorded step (stride 1, terminal padding).
    pub fn from_dataset(ds: &Dataset, spec: &BackboneSpec, norm: &ActionNormalizer) -> Result<Self> {
        let obs_dim = spec.obs.total();
        let chunk_dim = spec.chunk_dim();
        let mut obs = Vec::new();
        let mut targets = Vec::new();
        for e in &ds.episodes {
            for t in 0..e.len() {
                let o = &e.observations[t];
                o.check(&spec.obs)?;
                obs.extend(o.flat());
                let w = e.window(t, spec.horizon);
                let mut n = alloc::vec![0.0; chunk_dim];
                norm.normalize(&w, &mut n);
                targets.extend(n);
            }
        }
        if obs.is_empty() {
            return Err(Error::Empty { what: "dataset" });
        }
        Ok(ChunkSet {
            task: ds.task,
            obs_dim,
            chunk_dim,
            obs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.obs.len() / self.obs_dim
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn obs_row(&self, i: usize) -> &[f64] {
        &self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn target_row(&self, i: usize) -> &[f64] {
        &self.targets[i * self.chunk_dim..(i + 1) * self.chunk_dim]
    }

    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut o = Vec::with_capacity(idx.len() * self.obs_dim);
        let mut t = Vec::with_capacity(idx.len() * self.chunk_dim);
        for &i in idx {
            o.extend_from_slice(self.obs_row(i));
            t.extend_from_slice(self.target_row(i));
        }
        Ok((
            Tensor::matrix(idx.len(), self.obs_dim, o)?,
            Tensor::matrix(idx.len(), self.chunk_dim, t)?,
        ))
    }

    pub fn all(&self) -> Result<(Tensor, Tensor)> {
        Ok((
            Tensor::matrix(self.len(), self.obs_dim, self.obs.clone())?,
            Tensor::matrix(self.len(), self.chunk_dim, self.targets.clone())?,
        ))
    }
}

/// Produces training minibatches `(observations, normalized targets)`.
pub trait BatchSource {
    fn next_batch(&mut self, rng: &mut Rng, size: usize) -> Result<(Tensor, Tensor)>;
}

/// Uniform sampling (with replacement) over the union of several sets.
pub struct UniformSampler<'a> {
    sets: Vec<&'a ChunkSet>,
    total: usize,
}

impl<'a> UniformSampler<'a> {
    pub fn new(sets: Vec<&'a ChunkSet>) -> Result<Self> {
        let total = sets.iter().map(|s| s.len()).sum();
        if total == 0 {
            return Err(Error::Empty { what: "training data" });
        }
        Ok(UniformSampler { sets, total })
    }

    /// Row `i` of the concatenation.
    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (k, s) in self.sets.iter().enumerate() {
            if i < s.len() {
                return (k, i);
            }
            i -= s.len();
        }
        unreachable!("index within total")
    }
}

impl BatchSource for UniformSampler<'_> {
    fn next_batch(&mut self, rng: &mut Rng, size: usize) -> Result<(Tensor, Tensor)> {
        let mut o = Vec::new();
        let mut t = Vec::new();
        let mut rows = 0;
        for _ in 0..size {
            let (k, i) = self.locate(rng.below(self.total));
            o.extend_from_slice(self.sets[k].obs_row(i));
            t.extend_from_slice(self.sets[k].target_row(i));
            rows += 1;
        }
        let od = self.sets[0].obs_dim;
        let cd = self.sets[0].chunk_dim;
        Ok((Tensor::matrix(rows, od, o)?, Tensor::matrix(rows, cd, t)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
}

/// Minimizes the flow-matching loss over `trainable` with Adam.
/// Returns the loss of every step.
pub fn train_flow(
    model: &mut PolicyModel,
    trainable: &[ParamId],
    routes: &[LayerRoute],
    source: &mut dyn BatchSource,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mask: TrainMask = trainable.iter().copied().collect();
    let mut adam = Adam::new();
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let (obs, targets) = source.next_batch(rng, cfg.batch_size)?;
        let (loss, grads) = {
            let mut s = Session::train(&model.store, &mask);
            let l = model.flow_loss(&mut s, &obs, &targets, rng, routes)?;
            s.graph.backward(l)?;
            (s.graph.value(l).data()[0], s.grads())
        };
        if grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::non_finite("gradient"));
        }
        adam.step(&mut model.store, trainable, &grads, cfg.schedule.at(step))?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Multi-task training of the whole backbone on the union of the pretraining
/// datasets. Banks must be empty.
pub fn pretrain(model: &mut PolicyModel, sets: &[ChunkSet], cfg: &TrainConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    if !model.banks_empty() {
        return Err(Error::Config("pretraining requires empty banks".into()));
    }
    if sets.is_empty() {
        return Err(Error::Empty { what: "pretraining task set" });
    }
    let mut sampler = UniformSampler::new(sets.iter().collect())?;
    let params = model.base_params();
    let routes = model.inference_routes();
    train_flow(model, &params, &routes, &mut sampler, cfg, rng)
}
