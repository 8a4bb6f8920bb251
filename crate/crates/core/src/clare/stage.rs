use super::{decide_expansion, finalize_stats, link_auxiliary, zscore, Adapter, Decision, Discriminator};
use crate::optim::{Adam, LrSchedule};
use crate::params::{ParamId, Session, TrainMask};
use crate::policy::{LayerRoute, LayerSite, PolicyModel, Trace};
use crate::tensor::Tensor;
use crate::train::{train_flow, ChunkSet, TrainConfig, UniformSampler};
use crate::{Error, Result, Rng};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Hyperparameters of one continual-learning stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub adapter_rank: usize,
    pub disc_rank: usize,
    pub adapter_steps: u64,
    pub disc_steps: u64,
    pub batch_size: usize,
    pub adapter_lr: f64,
    pub disc_lr: f64,
    pub down_init_std: f64,
    /// Expansion threshold; `f64::INFINITY` never expands voluntarily.
    pub gamma: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            adapter_rank: 16,
            disc_rank: 16,
            adapter_steps: 3000,
            disc_steps: 500,
            batch_size: 32,
            adapter_lr: 3e-3,
            disc_lr: 5e-4,
            down_init_std: 0.02,
            gamma: 2.5,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.adapter_rank == 0 || self.disc_rank == 0 {
            return Err(Error::Config("ranks must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config("gamma must be >= 0".into()));
        }
        if !(self.adapter_lr > 0.0 && self.disc_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Expansion decision for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub decision: Decision,
    /// One per existing discriminator.
    pub zscores: Vec<f64>,
    /// Existing discriminator whose adapter is reused, for `Link`.
    pub linked_discriminator: Option<usize>,
    /// Adapter serving the new discriminator (an index that may not exist
    /// yet for `Expand`).
    pub adapter: usize,
    /// `Expand` imposed by the shallowest-layer fallback.
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    /// Stage being learned (1-based).
    pub stage: usize,
    pub layers: Vec<LayerPlan>,
}

impl ExpansionPlan {
    pub fn expanded(&self) -> usize {
        self.layers.iter().filter(|l| l.decision == Decision::Expand).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub site: LayerSite,
    #[serde(flatten)]
    pub plan: LayerPlan,
    pub disc_stats: (f64, f64),
}

/// Structured record of a learned stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub layers: Vec<LayerReport>,
    pub new_adapters: usize,
    pub new_adapter_params: usize,
    pub new_disc_params: usize,
    pub base_params: usize,
    /// Parameters added this stage (adapters and discriminators) over base.
    pub added_fraction: f64,
    pub adapter_fraction: f64,
    pub adapter_loss_first: f64,
    pub adapter_loss_last: f64,
    pub disc_loss_last: f64,
}

/// Expandable-layer inputs over a whole chunk set.
pub fn collect_layer_features(
    model: &PolicyModel,
    data: &ChunkSet,
    routes: &[LayerRoute],
    rng: &mut Rng,
) -> Result<Trace> {
    let (obs, targets) = data.all()?;
    model.collect_features(&obs, &targets, rng, routes)
}

/// Computes z-scores and decisions for stage `model.stage + 1` without
/// modifying the model.
pub fn plan_expansion(model: &PolicyModel, data: &ChunkSet, gamma: f64, rng: &mut Rng) -> Result<ExpansionPlan> {
    let stage = model.stage + 1;
    if model.banks.is_empty() {
        return Err(Error::Config("model has no expandable layers".into()));
    }
    let routes = model.inference_routes();
    let trace = collect_layer_features(model, data, &routes, rng)?;
    let mut layers = Vec::with_capacity(model.banks.len());
    for (l, bank) in model.banks.iter().enumerate() {
        let xs = trace.layer_inputs(l)?;
        let zscores = bank
            .discriminators
            .iter()
            .enumerate()
            .map(|(j, d)| zscore(d, &model.store, l, j, &xs))
            .collect::<Result<Vec<_>>>()?;
        let decision = decide_expansion(stage, &zscores, gamma);
        let (linked_discriminator, adapter) = match decision {
            Decision::Expand => (None, bank.adapters.len()),
            Decision::Link => {
                let (j, a) = link_auxiliary(bank, &model.store, &xs)?;
                (Some(j), a)
            }
        };
        layers.push(LayerPlan {
            decision,
            zscores,
            linked_discriminator,
            adapter,
            forced: false,
        });
    }
    if layers.iter().all(|p| p.decision == Decision::Link) {
        let p = &mut layers[0];
        p.decision = Decision::Expand;
        p.linked_discriminator = None;
        p.adapter = model.banks[0].adapters.len();
        p.forced = true;
    }
    Ok(ExpansionPlan { stage, layers })
}

/// Creates the planned adapters and discriminators and advances the stage.
/// Returns the parameters of the new adapters.
pub fn apply_expansion(
    model: &mut PolicyModel,
    plan: &ExpansionPlan,
    cfg: &StageConfig,
    rng: &mut Rng,
) -> Result<Vec<ParamId>> {
    if plan.stage != model.stage + 1 || plan.layers.len() != model.banks.len() {
        return Err(Error::Config("expansion plan does not match model stage".into()));
    }
    let mut new_params = Vec::new();
    for (l, p) in plan.layers.iter().enumerate() {
        let bank = &mut model.banks[l];
        if p.decision == Decision::Expand {
            let a = Adapter::create(
                &mut model.store,
                l,
                bank.adapters.len(),
                bank.dim,
                cfg.adapter_rank,
                plan.stage,
                cfg.down_init_std,
                rng,
            );
            new_params.extend(a.params());
            bank.adapters.push(a);
        }
        let d = Discriminator::create(
            &mut model.store,
            l,
            bank.discriminators.len(),
            bank.dim,
            cfg.disc_rank,
            plan.stage,
            rng,
        );
        bank.discriminators.push(d);
        bank.links.push(p.adapter);
    }
    model.stage = plan.stage;
    Ok(new_params)
}

/// Routing used while learning the current stage: every layer uses the
/// adapter linked to its newest discriminator.
pub fn stage_routes(model: &PolicyModel) -> Result<Vec<LayerRoute>> {
    model
        .banks
        .iter()
        .enumerate()
        .map(|(l, b)| {
            b.links
                .last()
                .map(|&a| LayerRoute::Fixed(a))
                .ok_or(Error::EmptyBank { layer: l })
        })
        .collect()
}

/// Phase A: flow-matching training of the new adapters only.
pub fn train_new_adapters(
    model: &mut PolicyModel,
    new_params: &[ParamId],
    data: &ChunkSet,
    cfg: &StageConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let routes = stage_routes(model)?;
    let mut sampler = UniformSampler::new(vec![data])?;
    let tc = TrainConfig {
        steps: cfg.adapter_steps,
        batch_size: cfg.batch_size,
        schedule: LrSchedule::Cosine {
            lr: cfg.adapter_lr,
            total: cfg.adapter_steps,
        },
    };
    train_flow(model, new_params, &routes, &mut sampler, &tc, rng)
}

/// Phase B: reconstruction training of each layer's newest discriminator
/// on precomputed features, followed by the statistics pass. Returns the
/// loss per step.
pub fn train_discriminators(
    model: &mut PolicyModel,
    features: &Trace,
    cfg: &StageConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let layers: Vec<(usize, Tensor)> = (0..model.banks.len())
        .map(|l| Ok((l, features.layer_inputs(l)?)))
        .collect::<Result<_>>()?;
    for (l, xs) in &layers {
        if xs.numel() == 0 {
            return Err(Error::Empty { what: "feature set" });
        }
        if model.banks[*l].is_empty() {
            return Err(Error::EmptyBank { layer: *l });
        }
    }
    let newest: Vec<Discriminator> = model
        .banks
        .iter()
        .map(|b| b.discriminators.last().cloned().expect("non-empty"))
        .collect();
    let ids: Vec<ParamId> = newest.iter().flat_map(|d| d.params()).collect();
    let mask: TrainMask = ids.iter().copied().collect();
    let schedule = LrSchedule::Constant { lr: cfg.disc_lr };
    let mut adam = Adam::new();
    let mut losses = Vec::with_capacity(cfg.disc_steps as usize);
    for step in 0..cfg.disc_steps {
        let (loss, grads) = {
            let mut s = Session::train(&model.store, &mask);
            let mut total = None;
            for ((_, xs), d) in layers.iter().zip(&newest) {
                let rows: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(xs.rows())).collect();
                let mut batch = Vec::with_capacity(rows.len() * xs.cols());
                for &r in &rows {
                    batch.extend_from_slice(xs.row(r));
                }
                let x = s.graph.constant(Tensor::matrix(rows.len(), xs.cols(), batch)?);
                let e = d.recon_errors(&mut s, x)?;
                let m = s.graph.mean(e);
                total = Some(match total {
                    None => m,
                    Some(t) => s.graph.add(t, m)?,
                });
            }
            let total = total.expect("at least one layer");
            s.graph.backward(total)?;
            (s.graph.value(total).data()[0], s.grads())
        };
        if !loss.is_finite() {
            return Err(Error::non_finite("discriminator reconstruction loss"));
        }
        adam.step(&mut model.store, &ids, &grads, schedule.at(step))?;
        losses.push(loss);
    }
    for (l, xs) in &layers {
        let bank = &mut model.banks[*l];
        let d = bank.discriminators.last_mut().expect("non-empty");
        let errors = (0..xs.rows())
            .map(|i| d.recon_error(&model.store, xs.row(i)))
            .collect::<Result<Vec<_>>>()?;
        d.stats = Some(finalize_stats(&errors)?);
    }
    Ok(losses)
}

/// Learns one stage from the current task's chunk set alone.
pub fn learn_stage(model: &mut PolicyModel, data: &ChunkSet, cfg: &StageConfig, rng: &mut Rng) -> Result<StageReport> {
    cfg.validate()?;
    let mut plan_rng = rng.fork(1);
    let mut init_rng = rng.fork(2);
    let mut adapter_rng = rng.fork(3);
    let mut feature_rng = rng.fork(4);
    let mut disc_rng = rng.fork(5);
    rng.next_u64();

    let plan = plan_expansion(model, data, cfg.gamma, &mut plan_rng)?;
    let bank_before = model.bank_param_count();
    let new_params = apply_expansion(model, &plan, cfg, &mut init_rng)?;
    let adapter_losses = train_new_adapters(model, &new_params, data, cfg, &mut adapter_rng)?;
    let routes = stage_routes(model)?;
    let features = collect_layer_features(model, data, &routes, &mut feature_rng)?;
    let disc_losses = train_discriminators(model, &features, cfg, &mut disc_rng)?;
    for b in &model.banks {
        b.check_invariants(model.stage)?;
    }

    let base = model.base_param_count();
    let new_adapter_params = model.store.numel(new_params.iter().copied());
    let added = model.bank_param_count() - bank_before;
    let layers = plan
        .layers
        .iter()
        .enumerate()
        .map(|(l, p)| {
            let bank = &model.banks[l];
            let st = bank.discriminators.last().and_then(|d| d.stats).expect("finalized");
            LayerReport {
                layer: l,
                site: bank.site,
                plan: p.clone(),
                disc_stats: (st.mean, st.std),
            }
        })
        .collect();
    let window = |v: &[f64], tail: bool| {
        if v.is_empty() {
            return 0.0;
        }
        let k = (v.len() / 10).max(1);
        let s = if tail { &v[v.len() - k..] } else { &v[..k] };
        s.iter().sum::<f64>() / k as f64
    };
    Ok(StageReport {
        stage: model.stage,
        layers,
        new_adapters: plan.expanded(),
        new_adapter_params,
        new_disc_params: added - new_adapter_params,
        base_params: base,
        added_fraction: added as f64 / base as f64,
        adapter_fraction: new_adapter_params as f64 / base as f64,
        adapter_loss_first: window(&adapter_losses, false),
        adapter_loss_last: window(&adapter_losses, true),
        disc_loss_last: window(&disc_losses, true),
    })
}
