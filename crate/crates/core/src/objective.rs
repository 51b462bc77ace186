//! ELBO terms, the cosine self-supervision term and their weighted sum.
//!
//! Every quantity here is maximized. Plain `f64` versions sit next to the
//! backend versions used for training so the two can be checked against each
//! other.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::diffnum::{softplus, Backend, Eval, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{Invariant, Model, Posterior, OBS_SIGMA_PARAM};
use crate::nets::ModelParams;
use crate::odeint::TimeGrid;

/// Guard used when normalizing embeddings.
pub const SSL_EPS: f64 = 1e-12;
/// Pairs per sequence above which pairs are subsampled.
pub const SSL_MAX_PAIRS: usize = 256;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `KL(N(mean, exp(log_var)) || N(0, I))`.
pub fn kl_diag_gaussian(mean: &[f64], log_var: &[f64]) -> f64 {
    assert_eq!(mean.len(), log_var.len());
    0.5 * mean.iter().zip(log_var).map(|(m, lv)| lv.exp() + m * m - 1.0 - lv).sum::<f64>()
}

/// Gaussian log-likelihood of `y` under mean `y_hat` and shared scale `sigma`.
pub fn recon_loglik(y: &[f64], y_hat: &[f64], sigma: f64) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::Model(format!("recon_loglik: {} targets vs {} predictions", y.len(), y_hat.len())));
    }
    if !(sigma > 0.0) {
        return Err(Error::Model(format!("recon_loglik: sigma must be positive, got {sigma}")));
    }
    let sq: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-0.5 * sq / (sigma * sigma) - y.len() as f64 * (sigma.ln() + HALF_LN_2PI))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SslValue {
    pub value: f64,
    pub pairs: usize,
    /// Sequences with fewer than two embeddings.
    pub skipped: usize,
    /// Set when no sequence had a pair, in which case `value` is 0.
    pub empty: bool,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = (v.iter().map(|x| x * x).sum::<f64>() + SSL_EPS * SSL_EPS).sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    normalized(a).iter().zip(normalized(b)).map(|(x, y)| x * y).sum()
}

/// Mean cosine similarity over all unordered within-sequence pairs.
/// `groups[s]` holds the embeddings of sequence `s`.
pub fn ssl_loss(groups: &[Vec<Vec<f64>>]) -> SslValue {
    let mut total = 0.0;
    let mut pairs = 0;
    let mut skipped = 0;
    for g in groups {
        if g.len() < 2 {
            skipped += 1;
            continue;
        }
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                total += cosine(&g[i], &g[j]);
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return SslValue { value: 0.0, pairs, skipped, empty: true };
    }
    SslValue { value: total / pairs as f64, pairs, skipped, empty: false }
}

/// Within-sequence pairs `(i, j)`, `i < j`, of `k` parts; a uniform subset
/// without replacement when there are more than `SSL_MAX_PAIRS`.
pub fn ssl_pairs(k: usize, rng: &mut ChaCha20Rng) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    if all.len() <= SSL_MAX_PAIRS {
        return all;
    }
    let mut picked = sample(rng, all.len(), SSL_MAX_PAIRS).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|p| all[p]).collect()
}

/// Backend version of [`kl_diag_gaussian`], summed over rows.
pub fn kl_term<B: Backend>(b: &mut B, post: &Posterior<B::T>) -> Result<B::T> {
    let var = b.exp(&post.log_var)?;
    let m2 = b.square(&post.mean)?;
    let s = b.add(&var, &m2)?;
    let s = b.sub(&s, &post.log_var)?;
    let s = b.add_scalar(&s, -1.0)?;
    let s = b.sum(&s)?;
    Ok(b.scale(&s, 0.5)?)
}

/// Backend version of [`recon_loglik`] over a list of `[rows, D]` frames.
/// `sigma_raw` is mapped through softplus.
pub fn recon_term<B: Backend>(b: &mut B, targets: &[B::T], preds: &[B::T], sigma_raw: &B::T) -> Result<B::T> {
    if targets.len() != preds.len() || targets.is_empty() {
        return Err(Error::Model(format!("recon_term: {} targets vs {} predictions", targets.len(), preds.len())));
    }
    let mut sq: Option<B::T> = None;
    let mut count = 0usize;
    for (y, p) in targets.iter().zip(preds) {
        if b.value(y).shape() != b.value(p).shape() {
            return Err(Error::Model(format!(
                "recon_term: target shape {:?} vs prediction shape {:?}",
                b.value(y).shape(),
                b.value(p).shape()
            )));
        }
        count += b.value(y).len();
        let r = b.sub(y, p)?;
        let r = b.square(&r)?;
        let r = b.sum(&r)?;
        sq = Some(match sq {
            None => r,
            Some(acc) => b.add(&acc, &r)?,
        });
    }
    let sigma = b.softplus(sigma_raw)?;
    let var = b.square(&sigma)?;
    let quad = b.div(&sq.unwrap(), &var)?;
    let quad = b.scale(&quad, -0.5)?;
    let log_s = b.log(&sigma)?;
    let norm = b.add_scalar(&log_s, HALF_LN_2PI)?;
    let norm = b.scale(&norm, -(count as f64))?;
    let ll = b.add(&quad, &norm)?;
    Ok(b.sum(&ll)?)
}

/// Backend SSL term over stacked parts (`[k * n, q]`, part-major). `None`
/// when there are no pairs.
pub fn ssl_term<B: Backend>(b: &mut B, inv: &Invariant<B::T>, rng: &mut ChaCha20Rng) -> Result<Option<B::T>> {
    let k = inv.n_parts;
    let rows = b.value(&inv.parts).rows();
    let n = rows / k.max(1);
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for s in 0..n {
        for (i, j) in ssl_pairs(k, rng) {
            left.push(i * n + s);
            right.push(j * n + s);
        }
    }
    if left.is_empty() {
        return Ok(None);
    }
    let sq = b.square(&inv.parts)?;
    let norm2 = b.sum_last(&sq)?;
    let norm2 = b.add_scalar(&norm2, SSL_EPS * SSL_EPS)?;
    let norm = b.sqrt(&norm2)?;
    let unit = b.div(&inv.parts, &norm)?;
    let l = b.gather_rows(&unit, left)?;
    let r = b.gather_rows(&unit, right)?;
    let prod = b.mul(&l, &r)?;
    let dots = b.sum_last(&prod)?;
    Ok(Some(b.mean(&dots)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub ssl: f64,
    pub total: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveOptions {
    pub lambda: f64,
    /// Multiplier on the KL term in `total` (warm-up); 1 otherwise.
    pub kl_weight: f64,
    /// Seed for SSL pair subsampling.
    pub pair_seed: u64,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self { lambda: 0.0, kl_weight: 1.0, pair_seed: 0 }
    }
}

struct Terms<T> {
    recon: T,
    kl: T,
    ssl: Option<T>,
    total: T,
    preds: Vec<T>,
}

fn build<B: Backend>(
    b: &mut B,
    model: &Model,
    p: &ModelParams,
    frames: &[Tensor],
    grid: &TimeGrid,
    eps: Tensor,
    opts: &ObjectiveOptions,
) -> Result<Terms<B::T>> {
    let samples = model.config().mc_samples;
    if frames.len() != grid.n_points {
        return Err(Error::Model(format!("{} frames on a {}-point grid", frames.len(), grid.n_points)));
    }
    let fs: Vec<B::T> = frames.iter().map(|f| b.constant(f.clone())).collect();
    let fwd = model.forward(b, p, &fs, grid, eps, samples)?;

    let targets: Vec<B::T> = if samples == 1 {
        fs.clone()
    } else {
        let n = frames[0].rows();
        let idx: Vec<usize> = (0..samples).flat_map(|_| 0..n).collect();
        fs.iter().map(|f| b.gather_rows(f, idx.clone())).collect::<std::result::Result<_, _>>()?
    };
    let sigma_raw = p.leaf(b, OBS_SIGMA_PARAM);
    let recon = recon_term(b, &targets, &fwd.predictions, &sigma_raw)?;
    let recon = b.scale(&recon, 1.0 / samples as f64)?;
    let kl = kl_term(b, &fwd.posterior)?;

    let mut rng = ChaCha20Rng::seed_from_u64(opts.pair_seed);
    let mut ssl_parts = Vec::new();
    for inv in [&fwd.invariants.content, &fwd.invariants.modulator].into_iter().flatten() {
        if let Some(s) = ssl_term(b, inv, &mut rng)? {
            ssl_parts.push(s);
        }
    }
    let ssl = match ssl_parts.len() {
        0 => None,
        1 => ssl_parts.pop(),
        k => {
            let refs: Vec<(f64, &B::T)> = ssl_parts[1..].iter().map(|s| (1.0, s)).collect();
            let s = b.lincomb(&ssl_parts[0], &refs)?;
            Some(b.scale(&s, 1.0 / k as f64)?)
        }
    };

    let mut total = b.lincomb(&recon, &[(-opts.kl_weight, &kl)])?;
    if opts.lambda != 0.0 {
        if let Some(s) = &ssl {
            total = b.lincomb(&total, &[(opts.lambda, s)])?;
        }
    }
    Ok(Terms { recon, kl, ssl, total, preds: fwd.predictions })
}

fn breakdown<B: Backend>(b: &B, t: &Terms<B::T>, opts: &ObjectiveOptions) -> LossBreakdown {
    let recon = b.value(&t.recon).item();
    let kl = b.value(&t.kl).item();
    LossBreakdown {
        elbo: recon - kl,
        recon,
        kl,
        ssl: t.ssl.as_ref().map_or(0.0, |s| b.value(s).item()),
        total: b.value(&t.total).item(),
        lambda: opts.lambda,
    }
}

/// First batch row whose predictions are not finite.
fn offending_row<B: Backend>(b: &B, preds: &[B::T], n: usize) -> usize {
    for p in preds {
        let t = b.value(p);
        let c = t.cols();
        for r in 0..t.rows() {
            if t.data()[r * c..(r + 1) * c].iter().any(|v| !v.is_finite()) {
                return r % n.max(1);
            }
        }
    }
    0
}

/// Objective value without gradients.
pub fn evaluate_objective(
    model: &Model,
    p: &ModelParams,
    frames: &[Tensor],
    grid: &TimeGrid,
    eps: Tensor,
    opts: &ObjectiveOptions,
) -> Result<LossBreakdown> {
    let mut b = Eval::new();
    let t = build(&mut b, model, p, frames, grid, eps, opts)?;
    Ok(breakdown(&b, &t, opts))
}

/// Objective and its gradient with respect to the flat parameter vector.
/// A non-finite total reports the batch-local sequence index.
pub fn total_objective(
    model: &Model,
    p: &ModelParams,
    frames: &[Tensor],
    grid: &TimeGrid,
    eps: Tensor,
    opts: &ObjectiveOptions,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut tape = Tape::new();
    let t = build(&mut tape, model, p, frames, grid, eps, opts)?;
    let loss = breakdown(&tape, &t, opts);
    if !loss.total.is_finite() {
        let index = offending_row(&tape, &t.preds, frames[0].rows());
        return Err(Error::NonFiniteLoss { step: 0, index });
    }
    let grads = tape.backward(t.total)?;
    Ok((loss, p.flatten_grads(&grads)))
}

/// Current observation noise scale.
pub fn obs_sigma(p: &ModelParams) -> f64 {
    softplus(p.slice(OBS_SIGMA_PARAM)[0])
}
