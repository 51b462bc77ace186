//! NODE, INODE and SINODE model assembly.
//!
//! All three variants share the same pieces: a recurrent initial-state encoder,
//! an MLP vector field integrated in latent space, and an MLP decoder. The
//! invariant variants add a content variable `c` (mean of per-frame embeddings,
//! fed to the decoder) and/or a dynamics modulator `m` (mean of per-window
//! recurrent embeddings, fed to the vector field).
//!
//! Batched tensors hold one row per sequence. Stacked invariant parts are
//! ordered part-major: row `k * n + s` is part `k` of sequence `s`. Sampled
//! rollouts are ordered sample-major in the same way.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container;
use crate::diffnum::{Backend, Eval, Tensor};
use crate::error::{Error, Result};
use crate::nets::{self, Activation, Init, MlpSpec, ModelParams, ParamEntry, ParamSlice, RnnSpec};
use crate::odeint::{integrate_system, BackendSystem, SolverSpec, TimeGrid};

/// Initial observation noise standard deviation.
pub const OBS_SIGMA_INIT: f64 = 0.1;
pub const OBS_SIGMA_PARAM: &str = "dec.sigma_raw";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Node,
    Inode,
    Sinode,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Node, Variant::Inode, Variant::Sinode];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Node => "node",
            Variant::Inode => "inode",
            Variant::Sinode => "sinode",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathways {
    Modulator,
    Content,
    Both,
}

fn default_pathways() -> Pathways {
    Pathways::Modulator
}
fn default_one() -> usize {
    1
}
fn default_width() -> usize {
    64
}
fn default_hidden() -> Vec<usize> {
    vec![64]
}
fn default_activation() -> Activation {
    Activation::Tanh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub variant: Variant,
    #[serde(default = "default_pathways")]
    pub pathways: Pathways,
    pub obs_dim: usize,
    pub q_x: usize,
    pub q_c: usize,
    /// Frames seen by the initial-state encoder.
    pub t_in: usize,
    /// Frames used to extract invariants.
    pub t_inv: usize,
    /// Window length for the modulator; defaults to `max(3, t_in)`.
    #[serde(default)]
    pub n_e: Option<usize>,
    pub solver: SolverSpec,
    /// Monte-Carlo samples of the initial state per sequence during training.
    #[serde(default = "default_one")]
    pub mc_samples: usize,
    #[serde(default = "default_width")]
    pub enc_hidden: usize,
    #[serde(default = "default_width")]
    pub inv_hidden: usize,
    #[serde(default = "default_hidden")]
    pub dyn_hidden: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub dec_hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

impl VariantConfig {
    pub fn window(&self) -> usize {
        self.n_e.unwrap_or(self.t_in.max(3))
    }

    pub fn is_invariant(&self) -> bool {
        self.variant != Variant::Node
    }

    pub fn modulator_active(&self) -> bool {
        self.is_invariant() && matches!(self.pathways, Pathways::Modulator | Pathways::Both)
    }

    pub fn content_active(&self) -> bool {
        self.is_invariant() && matches!(self.pathways, Pathways::Content | Pathways::Both)
    }

    /// Dimension of the integrated state: NODE folds `q_c` into it.
    pub fn latent_dim(&self) -> usize {
        if self.is_invariant() {
            self.q_x
        } else {
            self.q_x + self.q_c
        }
    }

    /// Leading frames the model reads from a sequence.
    pub fn context_frames(&self) -> usize {
        if self.is_invariant() {
            self.t_in.max(self.t_inv)
        } else {
            self.t_in
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = |f: &str| format!("model.{f}");
        if self.obs_dim == 0 {
            return Err(Error::config(m("obs_dim"), "must be >= 1"));
        }
        if self.q_x == 0 {
            return Err(Error::config(m("q_x"), "must be >= 1"));
        }
        if self.t_in == 0 {
            return Err(Error::config(m("t_in"), "must be >= 1"));
        }
        if self.mc_samples == 0 {
            return Err(Error::config(m("mc_samples"), "must be >= 1"));
        }
        if self.t_inv < self.t_in {
            return Err(Error::config(m("t_inv"), format!("t_inv ({}) must be >= t_in ({})", self.t_inv, self.t_in)));
        }
        if self.is_invariant() && self.q_c == 0 {
            return Err(Error::config(m("q_c"), "must be >= 1 for invariant variants"));
        }
        if self.modulator_active() {
            let ne = self.window();
            if ne < 3 {
                return Err(Error::config(m("n_e"), format!("window length must be >= 3, got {ne}")));
            }
            if self.t_inv <= ne {
                return Err(Error::config(m("t_inv"), format!("t_inv ({}) must exceed n_e ({ne})", self.t_inv)));
            }
        }
        self.solver.validate().map_err(|e| Error::config(m("solver"), e.to_string()))?;
        Ok(())
    }
}

/// Diagonal Gaussian over the initial latent state.
#[derive(Debug, Clone)]
pub struct Posterior<T> {
    pub mean: T,
    pub log_var: T,
}

/// Pooled invariant plus the per-frame / per-window parts it averages.
#[derive(Debug, Clone)]
pub struct Invariant<T> {
    pub pooled: T,
    pub parts: T,
    pub n_parts: usize,
}

#[derive(Debug, Clone)]
pub struct Invariants<T> {
    pub content: Option<Invariant<T>>,
    pub modulator: Option<Invariant<T>>,
}

impl<T> Invariants<T> {
    pub fn none() -> Self {
        Self { content: None, modulator: None }
    }
}

pub struct Forward<T> {
    pub posterior: Posterior<T>,
    pub invariants: Invariants<T>,
    /// Latent state at each grid point, `[samples * n, latent_dim]`.
    pub latents: Vec<T>,
    /// Decoded observation means at each grid point, `[samples * n, obs_dim]`.
    pub predictions: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: VariantConfig,
    encoder: RnnSpec,
    modulator: Option<RnnSpec>,
    content: Option<MlpSpec>,
    field: MlpSpec,
    decoder: MlpSpec,
}

impl Model {
    pub fn new(cfg: VariantConfig) -> Result<Self> {
        cfg.validate()?;
        let latent = cfg.latent_dim();
        let encoder = RnnSpec { input: cfg.obs_dim, hidden: cfg.enc_hidden, output: 2 * latent };
        let modulator = cfg
            .modulator_active()
            .then_some(RnnSpec { input: cfg.obs_dim, hidden: cfg.inv_hidden, output: cfg.q_c });
        let content = cfg
            .content_active()
            .then(|| MlpSpec::new(cfg.obs_dim, &[cfg.inv_hidden], cfg.q_c, cfg.activation));
        let field_in = if cfg.modulator_active() { cfg.q_x + cfg.q_c } else { latent };
        let field = MlpSpec::new(field_in, &cfg.dyn_hidden, latent, cfg.activation);
        let dec_in = if cfg.content_active() { latent + cfg.q_c } else { latent };
        let decoder = MlpSpec::new(dec_in, &cfg.dec_hidden, cfg.obs_dim, cfg.activation);
        for s in [&field, &decoder].into_iter().chain(content.as_ref()) {
            s.validate()?;
        }
        for r in std::iter::once(&encoder).chain(modulator.as_ref()) {
            r.validate()?;
        }
        Ok(Self { cfg, encoder, modulator, content, field, decoder })
    }

    pub fn config(&self) -> &VariantConfig {
        &self.cfg
    }

    pub fn field_spec(&self) -> &MlpSpec {
        &self.field
    }

    pub fn decoder_spec(&self) -> &MlpSpec {
        &self.decoder
    }

    /// Parameter layout; slice prefixes name the owning module
    /// (`enc` initial-state encoder, `inv` invariant extractors, `dyn` vector
    /// field, `dec` decoder and likelihood scale).
    pub fn layout(&self) -> Vec<ParamEntry> {
        let mut out = nets::rnn_layout("enc", &self.encoder);
        if let Some(m) = &self.modulator {
            out.extend(nets::rnn_layout("inv.mod", m));
        }
        if let Some(c) = &self.content {
            out.extend(nets::mlp_layout("inv.cont", c));
        }
        out.extend(nets::mlp_layout("dyn", &self.field));
        out.extend(nets::mlp_layout("dec", &self.decoder));
        let raw = (OBS_SIGMA_INIT.exp() - 1.0).ln();
        out.push(ParamEntry::new(OBS_SIGMA_PARAM.into(), vec![1], Init::Const(raw)));
        out
    }

    pub fn init_params(&self, seed: u64) -> Result<ModelParams> {
        nets::init_params(&self.layout(), seed)
    }

    fn need(frames: usize, have: usize, what: &str) -> Result<()> {
        if have < frames || frames == 0 {
            return Err(Error::Model(format!("{what} needs {frames} frames, got {have}")));
        }
        Ok(())
    }

    /// Posterior over the initial state from the first `t_in` frames.
    pub fn encode_initial<B: Backend>(&self, b: &mut B, p: &ModelParams, frames: &[B::T]) -> Result<Posterior<B::T>> {
        Self::need(self.cfg.t_in, frames.len(), "encode_initial")?;
        let out = nets::rnn_encode(b, p, "enc", &self.encoder, &frames[..self.cfg.t_in])?;
        let q = self.cfg.latent_dim();
        Ok(Posterior { mean: b.slice(&out, 0, q)?, log_var: b.slice(&out, q, q)? })
    }

    /// `mean + exp(log_var / 2) * eps`
    pub fn sample_initial<B: Backend>(&self, b: &mut B, post: &Posterior<B::T>, eps: Tensor) -> Result<B::T> {
        let half = b.scale(&post.log_var, 0.5)?;
        let std = b.exp(&half)?;
        let e = b.constant(eps);
        let noise = b.mul(&std, &e)?;
        Ok(b.add(&post.mean, &noise)?)
    }

    /// Per-frame content embeddings of `frames`, stacked part-major.
    pub fn content_parts<B: Backend>(&self, b: &mut B, p: &ModelParams, frames: &[B::T]) -> Result<B::T> {
        let spec = self.content.as_ref().ok_or_else(|| Error::Model("content pathway is inactive".into()))?;
        if frames.is_empty() {
            return Err(Error::Model("content extraction needs at least one frame".into()));
        }
        let refs: Vec<&B::T> = frames.iter().collect();
        let stacked = b.concat_rows(&refs)?;
        nets::mlp_forward(b, p, "inv.cont", spec, &stacked)
    }

    /// Embeddings of the `n_windows` windows `frames[i..i + n_e]`, stacked part-major.
    pub fn window_parts<B: Backend>(&self, b: &mut B, p: &ModelParams, frames: &[B::T], n_windows: usize) -> Result<B::T> {
        let spec = self.modulator.as_ref().ok_or_else(|| Error::Model("modulator pathway is inactive".into()))?;
        let ne = self.cfg.window();
        if n_windows == 0 || frames.len() < n_windows + ne - 1 {
            return Err(Error::Model(format!(
                "{n_windows} windows of length {ne} need {} frames, got {}",
                n_windows + ne - 1,
                frames.len()
            )));
        }
        let mut steps = Vec::with_capacity(ne);
        for s in 0..ne {
            let refs: Vec<&B::T> = (0..n_windows).map(|i| &frames[i + s]).collect();
            steps.push(b.concat_rows(&refs)?);
        }
        nets::rnn_encode(b, p, "inv.mod", spec, &steps)
    }

    /// Mean over the `k` stacked parts of each sequence.
    pub fn pool<B: Backend>(&self, b: &mut B, parts: &B::T, k: usize) -> Result<B::T> {
        Ok(b.mean_blocks(parts, k)?)
    }

    /// `c = mean_i g(y_i)` over the first `t_inv` frames.
    pub fn extract_content<B: Backend>(&self, b: &mut B, p: &ModelParams, frames: &[B::T]) -> Result<Invariant<B::T>> {
        let t = self.cfg.t_inv;
        Self::need(t, frames.len(), "extract_content")?;
        let parts = self.content_parts(b, p, &frames[..t])?;
        let pooled = self.pool(b, &parts, t)?;
        Ok(Invariant { pooled, parts, n_parts: t })
    }

    /// `m = mean_i g(y_{i:i+n_e})` over the `t_inv - n_e` windows of the first `t_inv` frames.
    pub fn extract_modulator<B: Backend>(&self, b: &mut B, p: &ModelParams, frames: &[B::T]) -> Result<Invariant<B::T>> {
        let t = self.cfg.t_inv;
        let ne = self.cfg.window();
        if t <= ne {
            return Err(Error::config("model.t_inv", format!("t_inv ({t}) must exceed n_e ({ne})")));
        }
        Self::need(t, frames.len(), "extract_modulator")?;
        let k = t - ne;
        let parts = self.window_parts(b, p, &frames[..t], k)?;
        let pooled = self.pool(b, &parts, k)?;
        Ok(Invariant { pooled, parts, n_parts: k })
    }

    pub fn invariants<B: Backend>(&self, b: &mut B, p: &ModelParams, frames: &[B::T]) -> Result<Invariants<B::T>> {
        let content = if self.cfg.content_active() { Some(self.extract_content(b, p, frames)?) } else { None };
        let modulator = if self.cfg.modulator_active() { Some(self.extract_modulator(b, p, frames)?) } else { None };
        Ok(Invariants { content, modulator })
    }

    /// `f([x, m])` when the modulator is active, `f(x)` otherwise.
    pub fn dynamics<B: Backend>(&self, b: &mut B, p: &ModelParams, x: &B::T, m: Option<&B::T>) -> Result<B::T> {
        let input = match (self.cfg.modulator_active(), m) {
            (true, Some(m)) => b.concat(&[x, m])?,
            (false, None) => x.clone(),
            (true, None) => return Err(Error::Model("dynamics needs the modulator".into())),
            (false, Some(_)) => return Err(Error::Model("modulator pathway is inactive".into())),
        };
        nets::mlp_forward(b, p, "dyn", &self.field, &input)
    }

    /// Observation mean from `[x, c]` (content active) or `x`.
    pub fn decode<B: Backend>(&self, b: &mut B, p: &ModelParams, x: &B::T, c: Option<&B::T>) -> Result<B::T> {
        let input = match (self.cfg.content_active(), c) {
            (true, Some(c)) => b.concat(&[x, c])?,
            (false, None) => x.clone(),
            (true, None) => return Err(Error::Model("decode needs the content variable".into())),
            (false, Some(_)) => return Err(Error::Model("content pathway is inactive".into())),
        };
        nets::mlp_forward(b, p, "dec", &self.decoder, &input)
    }

    pub fn latent_path<B: Backend>(
        &self,
        b: &mut B,
        p: &ModelParams,
        x0: B::T,
        m: Option<&B::T>,
        grid: &TimeGrid,
    ) -> Result<Vec<B::T>> {
        if self.cfg.modulator_active() != m.is_some() {
            return Err(Error::Model("modulator presence does not match the configured pathways".into()));
        }
        let mut sys = BackendSystem {
            backend: b,
            field: |b: &mut B, x: &B::T| {
                // pathway mismatches are ruled out above, so only shape errors remain
                self.dynamics(b, p, x, m).map_err(|e| match e {
                    Error::Diff(d) => d,
                    other => unreachable!("{other}"),
                })
            },
        };
        Ok(integrate_system(&mut sys, x0, grid, &self.cfg.solver)?)
    }

    /// Full pass: encode, extract invariants, draw `samples` initial states per
    /// sequence from `eps` (`[samples * n, latent_dim]`), integrate on `grid`
    /// and decode every state.
    pub fn forward<B: Backend>(
        &self,
        b: &mut B,
        p: &ModelParams,
        frames: &[B::T],
        grid: &TimeGrid,
        eps: Tensor,
        samples: usize,
    ) -> Result<Forward<B::T>> {
        let n = b.value(&frames[0]).rows();
        let q = self.cfg.latent_dim();
        if eps.shape() != [samples * n, q] {
            return Err(Error::Model(format!("eps has shape {:?}, expected [{}, {q}]", eps.shape(), samples * n)));
        }
        let posterior = self.encode_initial(b, p, frames)?;
        let invariants = self.invariants(b, p, frames)?;
        let rep = |b: &mut B, t: &B::T| -> Result<B::T> {
            if samples == 1 {
                Ok(t.clone())
            } else {
                Ok(b.gather_rows(t, (0..samples).flat_map(|_| 0..n).collect())?)
            }
        };
        let post_rep = Posterior { mean: rep(b, &posterior.mean)?, log_var: rep(b, &posterior.log_var)? };
        let x0 = self.sample_initial(b, &post_rep, eps)?;
        let m = invariants.modulator.as_ref().map(|i| rep(b, &i.pooled)).transpose()?;
        let c = invariants.content.as_ref().map(|i| rep(b, &i.pooled)).transpose()?;
        let latents = self.latent_path(b, p, x0, m.as_ref(), grid)?;
        let predictions = latents.iter().map(|x| self.decode(b, p, x, c.as_ref())).collect::<Result<Vec<_>>>()?;
        Ok(Forward { posterior, invariants, latents, predictions })
    }

    /// Value-only rollout of `samples` trajectories per context sequence.
    /// `context` holds at least `context_frames()` frames, each `[n, obs_dim]`.
    pub fn rollout(
        &self,
        p: &ModelParams,
        context: &[Tensor],
        grid: &TimeGrid,
        eps: Tensor,
        samples: usize,
    ) -> Result<Rollout> {
        let need = self.cfg.context_frames();
        Self::need(need, context.len(), "rollout")?;
        let mut b = Eval::new();
        let frames: Vec<_> = context[..need].iter().map(|f| b.constant(f.clone())).collect();
        let n = context[0].rows();
        let fwd = self.forward(&mut b, p, &frames, grid, eps, samples)?;
        let unwrap = |v: Vec<std::rc::Rc<Tensor>>| v.into_iter().map(|t| (*t).clone()).collect();
        Ok(Rollout {
            samples,
            n_seq: n,
            modulator: fwd.invariants.modulator.map(|i| (*i.pooled).clone()),
            content: fwd.invariants.content.map(|i| (*i.pooled).clone()),
            latents: unwrap(fwd.latents),
            predictions: unwrap(fwd.predictions),
        })
    }
}

/// Sampled trajectories, rows sample-major (`sample * n_seq + seq`).
#[derive(Debug, Clone)]
pub struct Rollout {
    pub samples: usize,
    pub n_seq: usize,
    pub modulator: Option<Tensor>,
    pub content: Option<Tensor>,
    pub latents: Vec<Tensor>,
    pub predictions: Vec<Tensor>,
}

impl Rollout {
    fn sample_mean(&self, states: &[Tensor]) -> Vec<Tensor> {
        states
            .iter()
            .map(|t| {
                let c = t.cols();
                let mut out = vec![0.0; self.n_seq * c];
                for l in 0..self.samples {
                    for (o, v) in out.iter_mut().zip(&t.data()[l * self.n_seq * c..(l + 1) * self.n_seq * c]) {
                        *o += v;
                    }
                }
                let inv = 1.0 / self.samples as f64;
                Tensor::matrix(self.n_seq, c, out.into_iter().map(|v| v * inv).collect())
            })
            .collect()
    }

    /// Mean prediction over samples at each grid point, `[n_seq, obs_dim]`.
    pub fn mean_prediction(&self) -> Vec<Tensor> {
        self.sample_mean(&self.predictions)
    }

    pub fn mean_latent(&self) -> Vec<Tensor> {
        self.sample_mean(&self.latents)
    }
}

/// `[n, dim]` frame tensors for the listed sequences, first `n_frames` frames.
pub fn batch_frames(ds: &crate::datagen::Dataset, idx: &[usize], n_frames: usize) -> Vec<Tensor> {
    (0..n_frames)
        .map(|t| {
            let mut data = Vec::with_capacity(idx.len() * ds.dim);
            for &s in idx {
                data.extend_from_slice(ds.frame(s, t));
            }
            Tensor::matrix(idx.len(), ds.dim, data)
        })
        .collect()
}


pub const CHECKPOINT_VERSION: u32 = 1;

/// Adam moments saved alongside parameters so training can resume.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub step: usize,
    /// Epochs completed.
    pub epoch: usize,
    pub seed: u64,
    pub best_val_mse: Option<f64>,
    pub epochs_since_best: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: VariantConfig,
    pub params: ModelParams,
    pub state: TrainingState,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::new(self.config.clone())
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut payload = ck.params.values().to_vec();
    if let Some(o) = &ck.optimizer {
        payload.extend_from_slice(&o.m);
        payload.extend_from_slice(&o.v);
    }
    let header = json!({
        "variant": ck.config.variant,
        "config": ck.config,
        "state": ck.state,
        "slices": ck.params.slices(),
        "n_params": ck.params.len(),
        "optimizer_t": ck.optimizer.as_ref().map(|o| o.t),
    });
    container::write(path, "checkpoint", CHECKPOINT_VERSION, header, &payload)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, payload) = container::read(path, "checkpoint", CHECKPOINT_VERSION)?;
    let fmt = |msg: String| Error::Format { path: path.into(), msg };
    let field = |k: &str| header.get(k).cloned().ok_or_else(|| fmt(format!("header lacks `{k}`")));
    let config: VariantConfig = serde_json::from_value(field("config")?).map_err(|e| fmt(format!("config: {e}")))?;
    let state: TrainingState = serde_json::from_value(field("state")?).map_err(|e| fmt(format!("state: {e}")))?;
    let slices: Vec<ParamSlice> = serde_json::from_value(field("slices")?).map_err(|e| fmt(format!("slices: {e}")))?;
    let n = field("n_params")?.as_u64().ok_or_else(|| fmt("bad n_params".into()))? as usize;
    let opt_t = field("optimizer_t")?.as_u64();
    let expected = if opt_t.is_some() { 3 * n } else { n };
    if payload.len() != expected {
        return Err(fmt(format!("payload holds {} values, expected {expected}", payload.len())));
    }
    let params = ModelParams::from_parts(slices, payload[..n].to_vec())?;
    let model = Model::new(config.clone())?;
    let layout = model.layout();
    if layout.len() != params.slices().len()
        || layout.iter().zip(params.slices()).any(|(e, s)| e.name != s.name || e.shape != s.shape)
    {
        return Err(fmt("parameter layout does not match the stored model config".into()));
    }
    let optimizer = opt_t.map(|t| OptimizerState { m: payload[n..2 * n].to_vec(), v: payload[2 * n..].to_vec(), t });
    Ok(Checkpoint { config, params, state, optimizer })
}
