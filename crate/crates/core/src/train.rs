//! Mini-batch Adam on the negated objective with validation-based model
//! selection.
//!
//! Randomness is derived from `(seed, purpose, index)` so that a run is a pure
//! function of its configuration: batch order from `(seed, epoch)`, initial
//! state noise and pair subsampling from `(seed, step)`.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::diffnum::Tensor;
use crate::error::{Error, Result};
use crate::model::{
    batch_frames, load_checkpoint, save_checkpoint, Checkpoint, Model, OptimizerState, TrainingState, VariantConfig,
};
use crate::nets::ModelParams;
use crate::objective::{total_objective, LossBreakdown, ObjectiveOptions};

pub const LOG_HEADER: &str = "step,epoch,elbo,recon,kl,ssl,total,val_mse";
pub const BEST_FILE: &str = "checkpoint.bin";
pub const LAST_FILE: &str = "last.bin";
pub const LOG_FILE: &str = "train_log.csv";

const TAG_BATCH: u64 = 1;
const TAG_EPS: u64 = 2;
const TAG_PAIRS: u64 = 3;

/// Independent generator for `(seed, tag, index)`.
pub fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream((tag << 48) ^ index);
    rng
}

/// `[rows, cols]` standard-normal draws.
pub fn normal_tensor(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data)
}

fn default_lr() -> f64 {
    0.002
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the self-supervised term; unset means 0.
    #[serde(default)]
    pub lambda: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub kl_warmup_epochs: usize,
    /// Epochs without validation improvement before stopping.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Hard cap on optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    pub fn sinusoid(seed: u64) -> Self {
        Self {
            lr: default_lr(),
            betas: default_betas(),
            eps: default_eps(),
            batch_size: 16,
            epochs: 300,
            lambda: None,
            seed,
            kl_warmup_epochs: 0,
            patience: Some(30),
            max_steps: None,
        }
    }

    pub fn lotka_volterra(seed: u64) -> Self {
        Self { batch_size: 32, epochs: 200, ..Self::sinusoid(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        let t = |f: &str| format!("train.{f}");
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(t("lr"), "must be positive"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::config(t("betas"), "each beta must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(t("eps"), "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(t("batch_size"), "must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config(t("epochs"), "must be >= 1"));
        }
        if !self.lambda().is_finite() || self.lambda() < 0.0 {
            return Err(Error::config(t("lambda"), "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(0.0)
    }

    fn kl_weight(&self, epoch: usize) -> f64 {
        if self.kl_warmup_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / self.kl_warmup_epochs as f64).min(1.0)
        }
    }
}

/// One Adam update descending along `grads`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Model(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { step: state.t as usize });
    }
    let (b1, b2) = cfg.betas;
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Set on the last step of each epoch.
    pub val_mse: Option<f64>,
}

impl LogRow {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        let val = self.val_mse.map(|v| format!("{v:.8e}")).unwrap_or_default();
        format!(
            "{},{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{}",
            self.step, self.epoch, l.elbo, l.recon, l.kl, l.ssl, l.total, val
        )
    }
}

/// Mean squared error of the posterior-mean rollout (zero noise, one
/// sample) over the first `horizon` frames of every sequence.
pub fn validation_mse(model: &Model, params: &ModelParams, ds: &Dataset, horizon: usize) -> Result<f64> {
    let horizon = horizon.min(ds.n_t());
    let idx: Vec<usize> = (0..ds.n_seq()).collect();
    let ctx = batch_frames(ds, &idx, model.config().context_frames());
    let grid = ds.grid.with_len(horizon);
    let q = model.config().latent_dim();
    let r = model.rollout(params, &ctx, &grid, Tensor::zeros(&[idx.len(), q]), 1)?;
    let mut sq = 0.0;
    for (t, pred) in r.predictions.iter().enumerate() {
        for s in 0..ds.n_seq() {
            for (a, b) in pred.row(s).iter().zip(ds.frame(s, t)) {
                sq += (a - b) * (a - b);
            }
        }
    }
    Ok(sq / (horizon * ds.n_seq() * ds.dim) as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<LogRow>,
    pub stopped_early: bool,
}

/// Where a run keeps its artifacts; `None` trains in memory.
#[derive(Debug, Clone, Default)]
pub struct RunFiles {
    pub dir: Option<PathBuf>,
    pub resume: bool,
}

impl RunFiles {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn at(dir: impl Into<PathBuf>, resume: bool) -> Self {
        Self { dir: Some(dir.into()), resume }
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

fn check_data(cfg: &VariantConfig, train: &Dataset, val: &Dataset) -> Result<()> {
    for ds in [train, val] {
        if ds.dim != cfg.obs_dim {
            return Err(Error::config(
                "model.obs_dim",
                format!("model expects {}-dim observations, {} split has {}", cfg.obs_dim, ds.split.name(), ds.dim),
            ));
        }
        if ds.n_t() < cfg.context_frames() {
            return Err(Error::config(
                "model.t_inv",
                format!("model reads {} frames, {} split has {}", cfg.context_frames(), ds.split.name(), ds.n_t()),
            ));
        }
        if ds.n_seq() == 0 {
            return Err(Error::config("dataset", format!("{} split is empty", ds.split.name())));
        }
    }
    Ok(())
}

pub fn train(
    model_cfg: &VariantConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
    files: &RunFiles,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::new(model_cfg.clone())?;
    check_data(model_cfg, train_ds, val_ds)?;
    if let Some(d) = &files.dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let resumed = match (files.resume, files.path(LAST_FILE)) {
        (true, Some(p)) if p.exists() => {
            let ck = load_checkpoint(&p)?;
            if ck.config != *model_cfg {
                return Err(Error::config("model", "resume checkpoint was trained with a different model config"));
            }
            let best = load_checkpoint(&files.path(BEST_FILE).unwrap())?;
            Some((ck, best))
        }
        _ => None,
    };

    let (mut params, mut opt, mut state, mut best) = match resumed {
        Some((ck, best)) => {
            let opt = ck.optimizer.clone().unwrap_or_else(|| OptimizerState::new(ck.params.len()));
            (ck.params, opt, ck.state, best)
        }
        None => {
            let params = model.init_params(cfg.seed)?;
            let opt = OptimizerState::new(params.len());
            let state =
                TrainingState { step: 0, epoch: 0, seed: cfg.seed, best_val_mse: None, epochs_since_best: 0 };
            let best = Checkpoint { config: model_cfg.clone(), params: params.clone(), state: state.clone(), optimizer: None };
            (params, opt, state, best)
        }
    };

    let mut log_file = match files.path(LOG_FILE) {
        Some(p) => {
            let append = files.resume && state.step > 0 && p.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            if !append {
                writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&p, e))?;
            }
            Some((f, p))
        }
        None => None,
    };

    let n_t = train_ds.n_t();
    let grid = train_ds.grid.with_len(n_t);
    let q = model_cfg.latent_dim();
    let samples = model_cfg.mc_samples;
    let mut log = Vec::new();
    let mut stopped_early = false;

    'epochs: while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..train_ds.n_seq()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, TAG_BATCH, epoch as u64));
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let n_batches = batches.len();
        for (bi, idx) in batches.into_iter().enumerate() {
            if cfg.max_steps.is_some_and(|m| state.step >= m) {
                break 'epochs;
            }
            let frames = batch_frames(train_ds, idx, n_t);
            let eps = normal_tensor(&mut stream_rng(cfg.seed, TAG_EPS, state.step as u64), samples * idx.len(), q);
            let opts = ObjectiveOptions {
                lambda: cfg.lambda(),
                kl_weight: cfg.kl_weight(epoch),
                pair_seed: stream_rng(cfg.seed, TAG_PAIRS, state.step as u64).next_u64(),
            };
            let (loss, grads) = match total_objective(&model, &params, &frames, &grid, eps, &opts) {
                Ok(v) => v,
                Err(Error::NonFiniteLoss { index, .. }) => {
                    return Err(Error::NonFiniteLoss { step: state.step, index: idx[index] });
                }
                Err(e) => return Err(e),
            };
            let descent: Vec<f64> = grads.iter().map(|g| -g).collect();
            adam_step(params.values_mut(), &descent, &mut opt, cfg).map_err(|e| match e {
                Error::NonFiniteGradient { .. } => Error::NonFiniteGradient { step: state.step },
                e => e,
            })?;
            state.step += 1;

            let val_mse = if bi + 1 == n_batches { Some(validation_mse(&model, &params, val_ds, n_t)?) } else { None };
            let row = LogRow { step: state.step, epoch, loss, val_mse };
            if let Some((f, p)) = &mut log_file {
                writeln!(f, "{}", row.csv_line()).map_err(|e| Error::io(&*p, e))?;
            }
            log.push(row);
        }

        state.epoch += 1;
        let val = log.last().and_then(|r| r.val_mse).unwrap_or(f64::INFINITY);
        if state.best_val_mse.map_or(true, |b| val < b) {
            state.best_val_mse = Some(val);
            state.epochs_since_best = 0;
            best = Checkpoint { config: model_cfg.clone(), params: params.clone(), state: state.clone(), optimizer: None };
            if let Some(p) = files.path(BEST_FILE) {
                save_checkpoint(&p, &best)?;
            }
        } else {
            state.epochs_since_best += 1;
        }
        if let Some(p) = files.path(LAST_FILE) {
            let last = Checkpoint {
                config: model_cfg.clone(),
                params: params.clone(),
                state: state.clone(),
                optimizer: Some(opt.clone()),
            };
            save_checkpoint(&p, &last)?;
        }
        if cfg.patience.is_some_and(|p| state.epochs_since_best >= p) {
            stopped_early = true;
            break;
        }
    }

    if let Some(p) = files.path(BEST_FILE) {
        if !p.exists() {
            save_checkpoint(&p, &best)?;
        }
    }
    let last = Checkpoint { config: model_cfg.clone(), params, state, optimizer: Some(opt) };
    if let Some(p) = files.path(LAST_FILE) {
        save_checkpoint(&p, &last)?;
    }
    Ok(TrainOutcome { best, last, log, stopped_early })
}

/// Parses a training log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format { path: path.into(), msg: e.to_string() })?;
    let fmt = |msg: String| Error::Format { path: path.into(), msg };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        let num = |i: usize| rec.get(i).unwrap_or("").parse::<f64>().map_err(|e| fmt(format!("column {i}: {e}")));
        let int = |i: usize| rec.get(i).unwrap_or("").parse::<usize>().map_err(|e| fmt(format!("column {i}: {e}")));
        let val = rec.get(7).unwrap_or("");
        out.push(LogRow {
            step: int(0)?,
            epoch: int(1)?,
            loss: LossBreakdown { elbo: num(2)?, recon: num(3)?, kl: num(4)?, ssl: num(5)?, total: num(6)?, lambda: f64::NAN },
            val_mse: if val.is_empty() { None } else { Some(num(7)?) },
        });
    }
    Ok(out)
}
