//! Flow-matching action-chunk policy.
//!
//! An encoder of residual feedforward blocks maps the observation to a
//! feature vector. A decoder regresses the velocity field that transports
//! Gaussian noise to a normalized action chunk, conditioned on that feature
//! and a sinusoidal embedding of the flow time. Sampling integrates the field
//! with forward Euler. Designated blocks carry [`LayerBank`]s whose adapters
//! are added to the block's feedforward output.

use crate::autodiff::Var;
use crate::clare::LayerBank;
use crate::math::{cos, pow, sin};
use crate::nn::{FfnBlock, Linear};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Tensor;
use crate::{Error, Result, Rng};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// A feedforward block of the encoder or decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "part", content = "block", rename_all = "snake_case")]
pub enum LayerSite {
    Encoder(usize),
    Decoder(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObsSpec {
    pub proprio_dim: usize,
    pub context_dim: usize,
    pub instruction_dim: usize,
}

impl ObsSpec {
    pub fn total(&self) -> usize {
        self.proprio_dim + self.context_dim + self.instruction_dim
    }
}

impl Default for ObsSpec {
    fn default() -> Self {
        ObsSpec {
            proprio_dim: 3,
            context_dim: 6,
            instruction_dim: 16,
        }
    }
}

/// Architecture of the policy network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSpec {
    pub obs: ObsSpec,
    pub width: usize,
    pub ffn_hidden: usize,
    pub encoder_blocks: usize,
    pub decoder_width: usize,
    pub decoder_hidden: usize,
    pub decoder_blocks: usize,
    pub time_embed_dim: usize,
    /// Chunk length `H`.
    pub horizon: usize,
    /// Actions executed per chunk before replanning (`h`).
    pub exec_horizon: usize,
    pub action_dim: usize,
    /// Blocks that can receive adapters, shallowest first.
    pub expandable: Vec<LayerSite>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            obs: ObsSpec::default(),
            width: 128,
            ffn_hidden: 256,
            encoder_blocks: 3,
            decoder_width: 128,
            decoder_hidden: 256,
            decoder_blocks: 2,
            time_embed_dim: 32,
            horizon: 16,
            exec_horizon: 8,
            action_dim: 2,
            expandable: vec![LayerSite::Encoder(0), LayerSite::Encoder(1), LayerSite::Encoder(2)],
        }
    }
}

impl BackboneSpec {
    pub fn chunk_dim(&self) -> usize {
        self.horizon * self.action_dim
    }

    /// Depth order: all encoder blocks precede all decoder blocks.
    pub fn depth(&self, site: LayerSite) -> usize {
        match site {
            LayerSite::Encoder(i) => i,
            LayerSite::Decoder(i) => self.encoder_blocks + i,
        }
    }

    pub fn site_dim(&self, site: LayerSite) -> usize {
        match site {
            LayerSite::Encoder(_) => self.width,
            LayerSite::Decoder(_) => self.decoder_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if !(self.horizon >= self.exec_horizon && self.exec_horizon >= 1) {
            return err("need horizon >= exec_horizon >= 1");
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return err("time_embed_dim must be even and >= 2");
        }
        if self.width == 0 || self.decoder_width == 0 || self.action_dim == 0 || self.obs.total() == 0 {
            return err("dimensions must be positive");
        }
        for site in &self.expandable {
            let ok = match *site {
                LayerSite::Encoder(i) => i < self.encoder_blocks,
                LayerSite::Decoder(i) => i < self.decoder_blocks,
            };
            if !ok {
                return err("expandable layer index out of range");
            }
        }
        if self
            .expandable
            .windows(2)
            .any(|w| self.depth(w[0]) >= self.depth(w[1]))
        {
            return err("expandable layers must be strictly increasing in depth");
        }
        Ok(())
    }
}

/// Low-dimensional observation: robot state, scene context and a fixed
/// per-task instruction embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub proprio: Vec<f64>,
    pub context: Vec<f64>,
    pub instruction: Vec<f64>,
}

impl Observation {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.proprio.len() + self.context.len() + self.instruction.len());
        v.extend_from_slice(&self.proprio);
        v.extend_from_slice(&self.context);
        v.extend_from_slice(&self.instruction);
        v
    }

    pub fn check(&self, spec: &ObsSpec) -> Result<()> {
        if self.proprio.len() != spec.proprio_dim
            || self.context.len() != spec.context_dim
            || self.instruction.len() != spec.instruction_dim
        {
            return Err(Error::shape(
                "observation",
                &[
                    &[spec.proprio_dim, spec.context_dim, spec.instruction_dim],
                    &[self.proprio.len(), self.context.len(), self.instruction.len()],
                ],
            ));
        }
        Ok(())
    }
}

/// `H × action_dim` actions in environment units, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub horizon: usize,
    pub action_dim: usize,
    pub data: Vec<f64>,
}

impl ActionChunk {
    pub fn new(horizon: usize, action_dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != horizon * action_dim || horizon == 0 {
            return Err(Error::shape("action_chunk", &[&[horizon, action_dim], &[data.len()]]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("action chunk"));
        }
        Ok(ActionChunk {
            horizon,
            action_dim,
            data,
        })
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.data[t * self.action_dim..(t + 1) * self.action_dim]
    }
}

/// Per-dimension min-max map of actions onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionNormalizer {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ActionNormalizer {
    pub fn identity(dim: usize) -> Self {
        ActionNormalizer {
            lo: vec![-1.0; dim],
            hi: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(dim: usize, actions: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        let mut any = false;
        for a in actions {
            any = true;
            for d in 0..dim {
                lo[d] = lo[d].min(a[d]);
                hi[d] = hi[d].max(a[d]);
            }
        }
        if !any {
            return Err(Error::Empty { what: "action set" });
        }
        for d in 0..dim {
            if hi[d] - lo[d] < 1e-9 {
                lo[d] -= 0.5;
                hi[d] += 0.5;
            }
        }
        Ok(ActionNormalizer { lo, hi })
    }

    pub fn normalize(&self, a: &[f64], out: &mut [f64]) {
        let d = self.lo.len();
        for (i, (o, v)) in out.iter_mut().zip(a).enumerate() {
            let k = i % d;
            *o = 2.0 * (v - self.lo[k]) / (self.hi[k] - self.lo[k]) - 1.0;
        }
    }

    pub fn denormalize(&self, a: &[f64], out: &mut [f64]) {
        let d = self.lo.len();
        for (i, (o, v)) in out.iter_mut().zip(a).enumerate() {
            let k = i % d;
            *o = self.lo[k] + 0.5 * (v + 1.0) * (self.hi[k] - self.lo[k]);
        }
    }
}

/// Per-dimension standardization of observation rows, fitted on
/// pretraining data. Deviations are floored at [`ObsNormalizer::MIN_STD`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ObsNormalizer {
    pub const MIN_STD: f64 = 1e-2;

    pub fn identity(dim: usize) -> Self {
        ObsNormalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for r in rows {
            if r.len() != dim {
                return Err(Error::shape("obs_normalizer", &[&[dim], &[r.len()]]));
            }
            n += 1;
            for d in 0..dim {
                let delta = r[d] - mean[d];
                mean[d] += delta / n as f64;
                m2[d] += delta * (r[d] - mean[d]);
            }
        }
        if n == 0 {
            return Err(Error::Empty { what: "observation set" });
        }
        let std = m2
            .iter()
            .map(|v| crate::math::sqrt(v / n as f64).max(Self::MIN_STD))
            .collect();
        Ok(ObsNormalizer { mean, std })
    }

    pub fn apply(&self, obs: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if obs.cols() != d {
            return Err(Error::shape("obs_normalizer", &[&[d], obs.shape()]));
        }
        let mut out = obs.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let k = i % d;
            *v = (*v - self.mean[k]) / self.std[k];
        }
        Ok(out)
    }
}

/// Sinusoidal embedding of the flow time `s ∈ [0, 1]`, frequencies spaced
/// geometrically from 1 to 100 rad.
pub fn time_embedding(s: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let f = if half > 1 {
            pow(100.0, k as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out[k] = sin(f * s);
        out[half + k] = cos(f * s);
    }
    out
}

/// How one expandable layer chooses its adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRoute {
    /// No adapter.
    Off,
    /// Always the given adapter.
    Fixed(usize),
    /// Discriminator argmin, per input row.
    Auto,
}

/// Routing for the whole model.
#[derive(Debug, Clone, PartialEq)]
pub enum RoutingMode {
    /// Pretrained network only.
    None,
    /// Adapter index per expandable layer.
    Forced(Vec<usize>),
    /// Per-layer discriminator routing.
    Autonomous,
    PerLayer(Vec<LayerRoute>),
}

/// Values observed at the expandable layers during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// Input rows of each expandable layer (`x_ℓ`).
    pub inputs: Vec<Vec<Vec<f64>>>,
    /// Adapter chosen for each row, `None` when routing was off.
    pub selections: Vec<Vec<Option<usize>>>,
}

impl Trace {
    pub fn new(layers: usize) -> Self {
        Trace {
            inputs: vec![Vec::new(); layers],
            selections: vec![Vec::new(); layers],
        }
    }

    /// Captured inputs of layer `l` as a matrix.
    pub fn layer_inputs(&self, l: usize) -> Result<Tensor> {
        Tensor::from_rows(&self.inputs[l])
    }
}

/// Result of [`PolicyModel::encode`].
#[derive(Debug, Clone)]
pub struct Encoding {
    pub features: Tensor,
    pub trace: Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub input: Linear,
    pub encoder: Vec<FfnBlock>,
    pub decoder_in: Linear,
    pub decoder: Vec<FfnBlock>,
    pub output: Linear,
}

impl Backbone {
    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.input.params();
        for b in &self.encoder {
            v.extend(b.params());
        }
        v.extend(self.decoder_in.params());
        for b in &self.decoder {
            v.extend(b.params());
        }
        v.extend(self.output.params());
        v
    }
}

/// Frozen-able backbone plus one [`LayerBank`] per expandable layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub spec: BackboneSpec,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub banks: Vec<LayerBank>,
    pub normalizer: ActionNormalizer,
    pub obs_normalizer: ObsNormalizer,
    /// Number of continual-learning stages completed.
    pub stage: usize,
    /// Euler steps used when sampling.
    pub euler_steps: usize,
}

pub const DEFAULT_EULER_STEPS: usize = 10;

impl PolicyModel {
    pub fn new(spec: BackboneSpec, normalizer: ActionNormalizer, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let obs_dim = spec.obs.total();
        let mut store = ParamStore::new();
        let input = Linear::lecun(&mut store, "enc.input", spec.obs.total(), spec.width, rng);
        let encoder = (0..spec.encoder_blocks)
            .map(|i| FfnBlock::new(&mut store, &format!("enc.block{i}"), spec.width, spec.ffn_hidden, rng))
            .collect();
        let dec_in_dim = spec.width + spec.chunk_dim() + spec.time_embed_dim;
        let decoder_in = Linear::lecun(&mut store, "dec.input", dec_in_dim, spec.decoder_width, rng);
        let decoder = (0..spec.decoder_blocks)
            .map(|i| {
                FfnBlock::new(
                    &mut store,
                    &format!("dec.block{i}"),
                    spec.decoder_width,
                    spec.decoder_hidden,
                    rng,
                )
            })
            .collect();
        let output = Linear::lecun(&mut store, "dec.output", spec.decoder_width, spec.chunk_dim(), rng);
        let banks = spec
            .expandable
            .iter()
            .enumerate()
            .map(|(l, &site)| LayerBank::new(l, site, spec.site_dim(site)))
            .collect();
        Ok(PolicyModel {
            spec,
            store,
            backbone: Backbone {
                input,
                encoder,
                decoder_in,
                decoder,
                output,
            },
            banks,
            obs_normalizer: ObsNormalizer::identity(obs_dim),
            normalizer,
            stage: 0,
            euler_steps: DEFAULT_EULER_STEPS,
        })
    }

    pub fn base_params(&self) -> Vec<ParamId> {
        self.backbone.params()
    }

    pub fn base_param_count(&self) -> usize {
        self.store.numel(self.base_params())
    }

    pub fn bank_param_count(&self) -> usize {
        self.banks.iter().map(|b| self.store.numel(b.params())).sum()
    }

    fn bank_of(&self, site: LayerSite) -> Option<usize> {
        self.spec.expandable.iter().position(|&s| s == site)
    }

    pub fn banks_empty(&self) -> bool {
        self.banks.iter().all(|b| b.is_empty())
    }

    /// Default inference routing: autonomous wherever a bank has content.
    pub fn inference_routes(&self) -> Vec<LayerRoute> {
        self.banks
            .iter()
            .map(|b| if b.is_routable() { LayerRoute::Auto } else { LayerRoute::Off })
            .collect()
    }

    pub fn resolve_routes(&self, mode: &RoutingMode) -> Result<Vec<LayerRoute>> {
        let n = self.banks.len();
        let routes = match mode {
            RoutingMode::None => vec![LayerRoute::Off; n],
            RoutingMode::Autonomous => vec![LayerRoute::Auto; n],
            RoutingMode::Forced(idx) => {
                if idx.len() != n {
                    return Err(Error::shape("forced routing", &[&[n], &[idx.len()]]));
                }
                idx.iter().map(|&i| LayerRoute::Fixed(i)).collect()
            }
            RoutingMode::PerLayer(r) => {
                if r.len() != n {
                    return Err(Error::shape("routing", &[&[n], &[r.len()]]));
                }
                r.clone()
            }
        };
        for (l, r) in routes.iter().enumerate() {
            match *r {
                LayerRoute::Auto if !self.banks[l].is_routable() => return Err(Error::EmptyBank { layer: l }),
                LayerRoute::Fixed(i) if i >= self.banks[l].adapters.len() => {
                    return Err(Error::RouteOutOfRange {
                        layer: l,
                        index: i,
                        len: self.banks[l].adapters.len(),
                    })
                }
                _ => {}
            }
        }
        Ok(routes)
    }

    fn adapter_side(
        &self,
        s: &mut Session,
        l: usize,
        x: Var,
        route: LayerRoute,
        trace: &mut Option<&mut Trace>,
    ) -> Result<Option<Var>> {
        let bank = &self.banks[l];
        let xv = s.graph.value(x);
        let m = xv.rows();
        let selection: Vec<Option<usize>> = match route {
            LayerRoute::Off => vec![None; m],
            LayerRoute::Fixed(i) => {
                if i >= bank.adapters.len() {
                    return Err(Error::RouteOutOfRange {
                        layer: l,
                        index: i,
                        len: bank.adapters.len(),
                    });
                }
                vec![Some(i); m]
            }
            LayerRoute::Auto => (0..m)
                .map(|i| bank.route(&self.store, xv.row(i)).map(|r| Some(r.adapter)))
                .collect::<Result<_>>()?,
        };
        if let Some(t) = trace.as_deref_mut() {
            t.inputs[l].extend((0..m).map(|i| xv.row(i).to_vec()));
            t.selections[l].extend(selection.iter().copied());
        }
        let mut used: Vec<usize> = selection.iter().flatten().copied().collect();
        used.sort_unstable();
        used.dedup();
        let mut side: Option<Var> = None;
        for a in used {
            let mut out = bank.adapters[a].forward(s, x)?;
            if selection.iter().any(|&sel| sel != Some(a)) {
                let mask = selection
                    .iter()
                    .map(|&sel| if sel == Some(a) { 1.0 } else { 0.0 })
                    .collect();
                out = s.graph.mask_rows(out, mask)?;
            }
            side = Some(match side {
                None => out,
                Some(prev) => s.graph.add(prev, out)?,
            });
        }
        Ok(side)
    }

    fn block(
        &self,
        s: &mut Session,
        site: LayerSite,
        block: &FfnBlock,
        x: Var,
        routes: &[LayerRoute],
        trace: &mut Option<&mut Trace>,
    ) -> Result<Var> {
        let side = match self.bank_of(site) {
            Some(l) => self.adapter_side(s, l, x, routes[l], trace)?,
            None => None,
        };
        block.forward(s, x, side)
    }

    /// Encoder forward on raw observation rows `obs[m, obs_dim]`.
    pub fn encoder_forward(
        &self,
        s: &mut Session,
        obs: Var,
        routes: &[LayerRoute],
        trace: &mut Option<&mut Trace>,
    ) -> Result<Var> {
        let z = self.obs_normalizer.apply(s.graph.value(obs))?;
        let z = s.graph.constant(z);
        let mut x = self.backbone.input.forward(s, z)?;
        for (i, b) in self.backbone.encoder.iter().enumerate() {
            x = self.block(s, LayerSite::Encoder(i), b, x, routes, trace)?;
        }
        Ok(x)
    }

    /// Velocity field given encoder features, noisy chunks and flow times.
    pub fn decoder_forward(
        &self,
        s: &mut Session,
        features: Var,
        noisy: Var,
        times: &[f64],
        routes: &[LayerRoute],
        trace: &mut Option<&mut Trace>,
    ) -> Result<Var> {
        let te: Vec<f64> = times
            .iter()
            .flat_map(|&t| time_embedding(t, self.spec.time_embed_dim))
            .collect();
        let te = s
            .graph
            .constant(Tensor::matrix(times.len(), self.spec.time_embed_dim, te)?);
        let h = s.graph.concat_cols(&[features, noisy, te])?;
        let mut x = self.backbone.decoder_in.forward(s, h)?;
        for (i, b) in self.backbone.decoder.iter().enumerate() {
            x = self.block(s, LayerSite::Decoder(i), b, x, routes, trace)?;
        }
        self.backbone.output.forward(s, x)
    }

    pub fn obs_matrix(&self, obs: &[Observation]) -> Result<Tensor> {
        if obs.is_empty() {
            return Err(Error::Empty { what: "observation batch" });
        }
        let rows: Vec<Vec<f64>> = obs
            .iter()
            .map(|o| o.check(&self.spec.obs).map(|_| o.flat()))
            .collect::<Result<_>>()?;
        Tensor::from_rows(&rows)
    }

    /// Encoder features and captured expandable-layer inputs.
    pub fn encode(&self, obs: &[Observation], mode: &RoutingMode) -> Result<Encoding> {
        let routes = self.resolve_routes(mode)?;
        let m = self.obs_matrix(obs)?;
        self.encode_rows(&m, &routes)
    }

    pub fn encode_rows(&self, obs: &Tensor, routes: &[LayerRoute]) -> Result<Encoding> {
        let mut trace = Trace::new(self.banks.len());
        let mut s = Session::eval(&self.store);
        let o = s.graph.constant(obs.clone());
        let f = self.encoder_forward(&mut s, o, routes, &mut Some(&mut trace))?;
        Ok(Encoding {
            features: s.graph.value(f).clone(),
            trace,
        })
    }

    /// Conditional flow-matching loss on a batch of observation rows and
    /// normalized target chunks: mean over rows of
    /// `‖v(Aˢ, o, s) − (A¹ − A⁰)‖₂` with `s ~ U[0,1]`, `A⁰ ~ N(0, I)`.
    pub fn flow_loss(
        &self,
        s: &mut Session,
        obs: &Tensor,
        targets: &Tensor,
        rng: &mut Rng,
        routes: &[LayerRoute],
    ) -> Result<Var> {
        let m = obs.rows();
        let cd = self.spec.chunk_dim();
        if m == 0 || obs.numel() == 0 {
            return Err(Error::Empty { what: "batch" });
        }
        if targets.rows() != m || targets.cols() != cd {
            return Err(Error::shape("flow_loss", &[obs.shape(), targets.shape()]));
        }
        let (a_s, velocity, times) = draw_flow_path(targets, rng);
        let o = s.graph.constant(obs.clone());
        let f = self.encoder_forward(s, o, routes, &mut None)?;
        let a_s = s.graph.constant(a_s);
        let v = self.decoder_forward(s, f, a_s, &times, routes, &mut None)?;
        let goal = s.graph.constant(velocity);
        let diff = s.graph.sub(v, goal)?;
        let norms = s.graph.row_norm(diff)?;
        let loss = s.graph.mean(norms);
        let lv = s.graph.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::non_finite("flow matching loss"));
        }
        Ok(loss)
    }

    /// Inputs of every expandable layer for training rows, drawn along the
    /// same probability path as the loss. Encoder-layer inputs do not depend
    /// on the draw.
    pub fn collect_features(
        &self,
        obs: &Tensor,
        targets: &Tensor,
        rng: &mut Rng,
        routes: &[LayerRoute],
    ) -> Result<Trace> {
        let mut trace = Trace::new(self.banks.len());
        let needs_decoder = self
            .spec
            .expandable
            .iter()
            .any(|s| matches!(s, LayerSite::Decoder(_)));
        const CHUNK: usize = 256;
        let mut start = 0;
        while start < obs.rows() {
            let end = (start + CHUNK).min(obs.rows());
            let o = slice_rows(obs, start, end)?;
            let t = slice_rows(targets, start, end)?;
            let mut s = Session::eval(&self.store);
            let ov = s.graph.constant(o);
            let f = self.encoder_forward(&mut s, ov, routes, &mut Some(&mut trace))?;
            if needs_decoder {
                let (a_s, _, times) = draw_flow_path(&t, rng);
                let a_s = s.graph.constant(a_s);
                self.decoder_forward(&mut s, f, a_s, &times, routes, &mut Some(&mut trace))?;
            }
            start = end;
        }
        Ok(trace)
    }

    /// Draws one action chunk per observation by Euler integration from
    /// Gaussian noise. Row `i` uses `rngs[i]`. Routing is evaluated once per
    /// chunk for encoder layers.
    pub fn sample_chunks(&self, obs: &[Observation], rngs: &mut [Rng], steps: usize) -> Result<Vec<ActionChunk>> {
        if steps == 0 {
            return Err(Error::Config("Euler steps must be >= 1".into()));
        }
        if rngs.len() != obs.len() {
            return Err(Error::shape("sample_chunks", &[&[obs.len()], &[rngs.len()]]));
        }
        let routes = self.inference_routes();
        let om = self.obs_matrix(obs)?;
        let features = self.encode_rows(&om, &routes)?.features;
        let cd = self.spec.chunk_dim();
        let m = obs.len();
        let mut a0 = vec![0.0; m * cd];
        for (i, r) in rngs.iter_mut().enumerate() {
            r.fill_normal(&mut a0[i * cd..(i + 1) * cd], 1.0);
        }
        let a0 = Tensor::matrix(m, cd, a0)?;
        let a1 = euler_integrate(a0, steps, |a, t| {
            let mut s = Session::eval(&self.store);
            let f = s.graph.constant(features.clone());
            let av = s.graph.constant(a.clone());
            let v = self.decoder_forward(&mut s, f, av, &vec![t; m], &routes, &mut None)?;
            Ok(s.graph.value(v).clone())
        })?;
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let mut data = vec![0.0; cd];
            self.normalizer.denormalize(a1.row(i), &mut data);
            out.push(ActionChunk::new(self.spec.horizon, self.spec.action_dim, data)?);
        }
        Ok(out)
    }
}

/// `(Aˢ, A¹ − A⁰, s)` for each target row.
fn draw_flow_path(targets: &Tensor, rng: &mut Rng) -> (Tensor, Tensor, Vec<f64>) {
    let (m, cd) = (targets.rows(), targets.cols());
    let mut a_s = vec![0.0; m * cd];
    let mut vel = vec![0.0; m * cd];
    let mut times = Vec::with_capacity(m);
    for i in 0..m {
        let s = rng.uniform();
        times.push(s);
        let a1 = targets.row(i);
        for j in 0..cd {
            let a0 = rng.normal();
            a_s[i * cd + j] = (1.0 - s) * a0 + s * a1[j];
            vel[i * cd + j] = a1[j] - a0;
        }
    }
    (
        Tensor::matrix(m, cd, a_s).expect("sized"),
        Tensor::matrix(m, cd, vel).expect("sized"),
        times,
    )
}

pub(crate) fn slice_rows(t: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let c = t.cols();
    Tensor::matrix(end - start, c, t.data()[start * c..end * c].to_vec())
}

/// Forward Euler from `s = 0` to `s = 1` in `steps` equal steps:
/// `A ← A + (1/K) v(A, k/K)`.
///
/// The state is kept as `A⁰ + (k/K)·v̄ₖ` where `v̄ₖ` is the running mean of the
/// velocities seen so far. This is the Euler recursion rearranged; the
/// running mean of a constant is exact, so a constant field lands on
/// `A⁰ + c` with a single rounding for any `K`.
pub fn euler_integrate<F>(a0: Tensor, steps: usize, mut field: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::Config("Euler steps must be >= 1".into()));
    }
    let k_total = steps as f64;
    let mut mean_v = Tensor::zeros(a0.shape());
    let mut a = a0.clone();
    for k in 0..steps {
        let v = field(&a, k as f64 / k_total)?;
        if v.shape() != a.shape() {
            return Err(Error::shape("euler_integrate", &[a.shape(), v.shape()]));
        }
        let w = 1.0 / (k + 1) as f64;
        for (m, dv) in mean_v.data_mut().iter_mut().zip(v.data()) {
            *m += (dv - *m) * w;
        }
        let frac = (k + 1) as f64 / k_total;
        for ((x, x0), m) in a.data_mut().iter_mut().zip(a0.data()).zip(mean_v.data()) {
            *x = x0 + frac * m;
        }
        if !a.is_finite() {
            return Err(Error::non_finite(format!("Euler step {k}")));
        }
    }
    Ok(a)
}
