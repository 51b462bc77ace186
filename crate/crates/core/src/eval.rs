//! Forecast error at several horizons, embedding similarity structure and
//! PCA of latent trajectories, plus their CSV exports.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::datagen::Dataset;
use crate::diffnum::{Backend, Eval, Tensor};
use crate::error::{Error, Result};
use crate::model::{batch_frames, Model};
use crate::nets::ModelParams;
use crate::objective::SSL_EPS;
use crate::train::{normal_tensor, stream_rng};

/// Monte-Carlo samples per sequence at test time.
pub const EVAL_SAMPLES: usize = 20;
pub const THREADS_ENV: &str = "INODE_LAB_THREADS";

const TAG_EVAL: u64 = 11;

/// Worker threads for sequence-parallel evaluation.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Horizon {
    pub label: String,
    pub len: usize,
}

/// Expands labels such as `tin,nt,3nt,25` into frame counts.
pub fn parse_horizons(spec: &str, t_in: usize, n_t: usize) -> Result<Vec<Horizon>> {
    let mut out = Vec::new();
    for raw in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let lower = raw.to_ascii_lowercase();
        let len = if lower == "tin" {
            t_in
        } else if let Some(k) = lower.strip_suffix("nt") {
            let k = if k.is_empty() { 1 } else { k.parse::<usize>().map_err(|_| bad_horizon(raw))? };
            k * n_t
        } else {
            lower.parse::<usize>().map_err(|_| bad_horizon(raw))?
        };
        if len == 0 {
            return Err(bad_horizon(raw));
        }
        out.push(Horizon { label: lower, len });
    }
    if out.is_empty() {
        return Err(Error::config("eval.horizons", "no horizons given"));
    }
    Ok(out)
}

fn bad_horizon(raw: &str) -> Error {
    Error::config("eval.horizons", format!("cannot parse horizon `{raw}`"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub variant: String,
    pub seed: u64,
    pub horizon_label: String,
    pub horizon_len: usize,
    pub mse: f64,
    pub mse_std: f64,
}

#[derive(Debug, Clone)]
pub struct HorizonReport {
    pub rows: Vec<MetricRow>,
    /// `per_frame[s][t]`: squared error of the sample-mean prediction,
    /// averaged over dimensions; `None` for excluded sequences.
    pub per_frame: Vec<Option<Vec<f64>>>,
    pub failed: Vec<usize>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates per-frame errors into one row per horizon.
pub fn aggregate(per_frame: &[Option<Vec<f64>>], horizons: &[Horizon], variant: &str, seed: u64) -> Vec<MetricRow> {
    horizons
        .iter()
        .map(|h| {
            let per_seq: Vec<f64> = per_frame
                .iter()
                .flatten()
                .map(|e| e[..h.len].iter().sum::<f64>() / h.len as f64)
                .collect();
            let (mse, mse_std) = mean_std(&per_seq);
            MetricRow {
                variant: variant.to_string(),
                seed,
                horizon_label: h.label.clone(),
                horizon_len: h.len,
                mse,
                mse_std,
            }
        })
        .collect()
}

fn frame_errors(model: &Model, params: &ModelParams, ds: &Dataset, idx: &[usize], len: usize, seed: u64, samples: usize) -> Result<Vec<Vec<f64>>> {
    let q = model.config().latent_dim();
    let n = idx.len();
    // noise per sequence, so results do not depend on how sequences are batched
    let per_seq: Vec<Tensor> =
        idx.iter().map(|&s| normal_tensor(&mut stream_rng(seed, TAG_EVAL, s as u64), samples, q)).collect();
    let mut eps = vec![0.0; samples * n * q];
    for (j, e) in per_seq.iter().enumerate() {
        for l in 0..samples {
            eps[(l * n + j) * q..(l * n + j + 1) * q].copy_from_slice(e.row(l));
        }
    }
    let ctx = batch_frames(ds, idx, model.config().context_frames());
    let r = model.rollout(params, &ctx, &ds.grid.with_len(len), Tensor::matrix(samples * n, q, eps), samples)?;
    let mean = r.mean_prediction();
    let mut out = vec![Vec::with_capacity(len); n];
    for (t, pred) in mean.iter().enumerate() {
        for (j, &s) in idx.iter().enumerate() {
            let row = pred.row(j);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Model(format!("non-finite prediction for sequence {s}")));
            }
            let se = row.iter().zip(ds.frame(s, t)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / ds.dim as f64;
            out[j].push(se);
        }
    }
    Ok(out)
}

/// Rolls out `samples` trajectories per test sequence and scores the mean
/// prediction at every horizon. Sequences whose rollout fails are excluded
/// and listed in `failed`.
pub fn mse_at_horizons(
    model: &Model,
    params: &ModelParams,
    ds: &Dataset,
    horizons: &[Horizon],
    samples: usize,
    variant: &str,
    seed: u64,
) -> Result<HorizonReport> {
    let max_h = horizons.iter().map(|h| h.len).max().ok_or_else(|| Error::config("eval.horizons", "empty"))?;
    if max_h > ds.n_t() {
        return Err(Error::config(
            "eval.horizons",
            format!("horizon {max_h} exceeds the {} frames of the {} split", ds.n_t(), ds.split.name()),
        ));
    }
    if ds.dim != model.config().obs_dim {
        return Err(Error::config(
            "model.obs_dim",
            format!("checkpoint expects {}-dim observations, dataset has {}", model.config().obs_dim, ds.dim),
        ));
    }
    if samples == 0 {
        return Err(Error::config("eval.samples", "must be >= 1"));
    }
    let n = ds.n_seq();
    let threads = thread_count().min(n).max(1);
    let chunk = n.div_ceil(threads).max(1);
    let all: Vec<usize> = (0..n).collect();
    let chunks: Vec<&[usize]> = all.chunks(chunk).collect();
    let run_chunk = |idx: &[usize]| -> Vec<Option<Vec<f64>>> {
        match frame_errors(model, params, ds, idx, max_h, seed, samples) {
            Ok(v) => v.into_iter().map(Some).collect(),
            // isolate the failing sequences
            Err(_) => idx
                .iter()
                .map(|&s| frame_errors(model, params, ds, &[s], max_h, seed, samples).ok().map(|mut v| v.remove(0)))
                .collect(),
        }
    };
    let per_frame: Vec<Option<Vec<f64>>> = if chunks.len() == 1 {
        run_chunk(chunks[0])
    } else {
        std::thread::scope(|sc| {
            let handles: Vec<_> = chunks.iter().map(|c| sc.spawn(|| run_chunk(c))).collect();
            handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let failed = per_frame.iter().enumerate().filter(|(_, e)| e.is_none()).map(|(i, _)| i).collect();
    let rows = aggregate(&per_frame, horizons, variant, seed);
    Ok(HorizonReport { rows, per_frame, failed })
}

/// Per-part invariant embeddings for the first `n_seq` sequences, ordered
/// sequence-major. Content models embed each of the first `n_t` frames;
/// modulator-only models embed each length-`n_e` window inside them.
pub fn invariant_embeddings(model: &Model, params: &ModelParams, ds: &Dataset, n_seq: usize, n_t: usize) -> Result<(Vec<Vec<f64>>, usize)> {
    let cfg = model.config();
    if !cfg.is_invariant() {
        return Err(Error::config("model.variant", "similarity needs a model with an invariant pathway"));
    }
    if n_seq > ds.n_seq() || n_t > ds.n_t() || n_seq == 0 || n_t == 0 {
        return Err(Error::config(
            "eval.similarity",
            format!("requested {n_seq} x {n_t}, dataset has {} x {}", ds.n_seq(), ds.n_t()),
        ));
    }
    let idx: Vec<usize> = (0..n_seq).collect();
    let frames = batch_frames(ds, &idx, n_t);
    let mut b = Eval::new();
    let fs: Vec<_> = frames.into_iter().map(|f| b.constant(f)).collect();
    let (parts, k) = if cfg.content_active() {
        (model.content_parts(&mut b, params, &fs)?, n_t)
    } else {
        let ne = cfg.window();
        if n_t < ne + 1 {
            return Err(Error::config("eval.similarity", format!("need more than {ne} frames per sequence")));
        }
        let k = n_t - ne;
        (model.window_parts(&mut b, params, &fs, k)?, k)
    };
    let mut out = Vec::with_capacity(n_seq * k);
    for s in 0..n_seq {
        for i in 0..k {
            out.push(parts.row(i * n_seq + s).to_vec());
        }
    }
    Ok((out, k))
}

#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub values: Vec<Vec<f64>>,
    /// Indices of embeddings whose norm fell below the guard.
    pub zero_norm: Vec<usize>,
}

/// Pairwise cosine similarity with a unit diagonal.
pub fn cosine_similarity_matrix(emb: &[Vec<f64>]) -> SimilarityMatrix {
    let norms: Vec<f64> = emb.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let unit: Vec<Vec<f64>> = emb
        .iter()
        .zip(&norms)
        .map(|(v, n)| {
            let d = (n * n + SSL_EPS * SSL_EPS).sqrt();
            v.iter().map(|x| x / d).collect()
        })
        .collect();
    let n = emb.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        values[i][i] = 1.0;
        for j in i + 1..n {
            let c: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            values[i][j] = c;
            values[j][i] = c;
        }
    }
    let zero_norm = norms.iter().enumerate().filter(|(_, &n)| n < SSL_EPS).map(|(i, _)| i).collect();
    SimilarityMatrix { values, zero_norm }
}

/// Mean off-diagonal similarity inside sequence blocks and across them.
pub fn block_similarity(m: &[Vec<f64>], block: usize) -> (f64, f64) {
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i == j {
                continue;
            }
            if i / block == j / block {
                within += v;
                nw += 1;
            } else {
                between += v;
                nb += 1;
            }
        }
    }
    (within / nw.max(1) as f64, between / nb.max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct Pca {
    pub projected: Vec<Vec<f64>>,
    /// Fraction of total variance per kept component, non-increasing.
    pub explained: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Principal components of `points` (one row each), keeping `k`.
pub fn pca_embed(points: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if n == 0 || d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::Model("pca_embed needs a non-empty set of equal-length points".into()));
    }
    if n <= d {
        return Err(Error::Model(format!("pca_embed needs more points ({n}) than dimensions ({d})")));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    let kk = k.min(d);
    let mut components = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    for c in 0..k {
        if c < kk && total > 0.0 && vals[c] > 0.0 {
            let col = eig.eigenvectors.column(order[c]);
            // fix the sign so the largest-magnitude entry is positive
            let pivot = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
            let s = if pivot < 0.0 { -1.0 } else { 1.0 };
            components.push(col.iter().map(|v| v * s).collect::<Vec<f64>>());
            explained.push(vals[c] / total);
        } else {
            components.push(vec![0.0; d]);
            explained.push(0.0);
        }
    }
    let projected = (0..n)
        .map(|i| components.iter().map(|c| c.iter().zip(centered.row(i).iter()).map(|(a, b)| a * b).sum()).collect())
        .collect();
    Ok(Pca { projected, explained, components, mean })
}

/// Sample-mean latent trajectories `[seq][frame][q]` of the first `n_seq`
/// sequences over `len` grid points.
pub fn latent_trajectories(
    model: &Model,
    params: &ModelParams,
    ds: &Dataset,
    n_seq: usize,
    len: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let n_seq = n_seq.min(ds.n_seq());
    let q = model.config().latent_dim();
    let idx: Vec<usize> = (0..n_seq).collect();
    let mut eps = vec![0.0; samples * n_seq * q];
    for &s in &idx {
        let e = normal_tensor(&mut stream_rng(seed, TAG_EVAL, s as u64), samples, q);
        for l in 0..samples {
            eps[(l * n_seq + s) * q..(l * n_seq + s + 1) * q].copy_from_slice(e.row(l));
        }
    }
    let ctx = batch_frames(ds, &idx, model.config().context_frames());
    let r = model.rollout(params, &ctx, &ds.grid.with_len(len), Tensor::matrix(samples * n_seq, q, eps), samples)?;
    let mean = r.mean_latent();
    Ok((0..n_seq).map(|s| mean.iter().map(|t| t.row(s).to_vec()).collect()).collect())
}

fn fmt(v: f64) -> String {
    format!("{v:.8e}")
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format { path: path.into(), msg: format!("{other:?}") },
    }
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_rows(
        path,
        &["variant", "seed", "horizon_label", "horizon_len", "mse", "mse_std"],
        rows.iter().map(|r| {
            vec![
                r.variant.clone(),
                r.seed.to_string(),
                r.horizon_label.clone(),
                r.horizon_len.to_string(),
                fmt(r.mse),
                fmt(r.mse_std),
            ]
        }),
    )
}

pub fn write_per_frame_csv(path: &Path, per_frame: &[Option<Vec<f64>>]) -> Result<()> {
    write_rows(
        path,
        &["seq", "frame", "sq_err"],
        per_frame.iter().enumerate().flat_map(|(s, e)| {
            e.iter().flatten().enumerate().map(move |(t, v)| vec![s.to_string(), t.to_string(), fmt(*v)])
        }),
    )
}

/// Square matrix with `seq:part` row and column labels.
pub fn write_matrix_csv(path: &Path, m: &[Vec<f64>], block: usize) -> Result<()> {
    let labels: Vec<String> = (0..m.len()).map(|i| format!("{}:{}", i / block, i % block)).collect();
    let mut header = vec![String::new()];
    header.extend(labels.iter().cloned());
    let mut w = writer(path)?;
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (label, row) in labels.iter().zip(m) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| fmt(*v)));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `seq,frame,pc1,pc2` rows; `projected` is ordered sequence-major.
pub fn write_pca_csv(path: &Path, projected: &[Vec<f64>], frames_per_seq: usize) -> Result<()> {
    write_rows(
        path,
        &["seq", "frame", "pc1", "pc2"],
        projected.iter().enumerate().map(|(i, p)| {
            vec![
                (i / frames_per_seq).to_string(),
                (i % frames_per_seq).to_string(),
                fmt(p.first().copied().unwrap_or(0.0)),
                fmt(p.get(1).copied().unwrap_or(0.0)),
            ]
        }),
    )
}

pub fn write_explained_csv(path: &Path, explained: &[f64]) -> Result<()> {
    write_rows(
        path,
        &["component", "explained_variance"],
        explained.iter().enumerate().map(|(i, v)| vec![format!("pc{}", i + 1), fmt(*v)]),
    )
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |c: &str| Error::Format { path: path.into(), msg: format!("bad `{c}` value") };
        out.push(MetricRow {
            variant: rec.get(0).unwrap_or("").to_string(),
            seed: rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad("seed"))?,
            horizon_label: rec.get(2).unwrap_or("").to_string(),
            horizon_len: rec.get(3).and_then(|v| v.parse().ok()).ok_or_else(|| bad("horizon_len"))?,
            mse: rec.get(4).and_then(|v| v.parse().ok()).ok_or_else(|| bad("mse"))?,
            mse_std: rec.get(5).and_then(|v| v.parse().ok()).ok_or_else(|| bad("mse_std"))?,
        });
    }
    Ok(out)
}
