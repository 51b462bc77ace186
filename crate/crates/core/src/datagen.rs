//! Benchmark sequence generators (sinusoid, Lotka–Volterra, sinusoid with a
//! constant content channel) and the dataset container.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container;
use crate::error::{Error, Result};
use crate::odeint::{self, SolverSpec, TimeGrid};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Sinusoid,
    LotkaVolterra,
    SinusoidContent,
}

impl DatasetKind {
    pub fn dim(self) -> usize {
        match self {
            DatasetKind::Sinusoid => 1,
            DatasetKind::LotkaVolterra | DatasetKind::SinusoidContent => 2,
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            DatasetKind::Sinusoid => &["a", "f", "phi"],
            DatasetKind::LotkaVolterra => &["alpha", "gamma", "x1_0", "x2_0"],
            DatasetKind::SinusoidContent => &["a", "f", "phi", "b"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub kind: DatasetKind,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_t: usize,
    pub dt: f64,
    pub sigma: f64,
    pub seed: u64,
    /// Test sequences are this many times longer than `n_t` so forecasts
    /// beyond the training length have ground truth.
    #[serde(default = "default_test_len_factor")]
    pub test_len_factor: usize,
}

fn default_test_len_factor() -> usize {
    3
}

impl GenConfig {
    pub fn sinusoid(seed: u64) -> Self {
        Self {
            kind: DatasetKind::Sinusoid,
            n_train: 80,
            n_val: 25,
            n_test: 25,
            n_t: 50,
            dt: 0.1,
            sigma: 0.1,
            seed,
            test_len_factor: 3,
        }
    }

    pub fn lotka_volterra(seed: u64) -> Self {
        Self {
            kind: DatasetKind::LotkaVolterra,
            n_train: 500,
            n_val: 100,
            n_test: 100,
            n_t: 200,
            ..Self::sinusoid(seed)
        }
    }

    pub fn sinusoid_content(seed: u64) -> Self {
        Self { kind: DatasetKind::SinusoidContent, ..Self::sinusoid(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("n_test", self.n_test),
            ("test_len_factor", self.test_len_factor),
        ];
        for (name, v) in positive {
            if v < 1 {
                return Err(Error::config(format!("dataset.{name}"), "must be >= 1"));
            }
        }
        if self.n_t < 2 {
            return Err(Error::config("dataset.n_t", "must be >= 2"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dataset.dt", "must be positive"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("dataset.sigma", "must be >= 0"));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    pub fn len(&self, split: Split) -> usize {
        match split {
            Split::Test => self.n_t * self.test_len_factor,
            _ => self.n_t,
        }
    }
}

/// `n_seq` sequences of `n_t` frames of `dim` values, stored `[seq, time, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub split: Split,
    pub grid: TimeGrid,
    pub dim: usize,
    pub observations: Vec<f64>,
    /// Generator parameters per sequence, named by `kind.param_names()`.
    pub true_params: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub config: GenConfig,
}

impl Dataset {
    pub fn n_seq(&self) -> usize {
        self.true_params.len()
    }

    pub fn n_t(&self) -> usize {
        self.grid.n_points
    }

    pub fn sequence(&self, n: usize) -> &[f64] {
        let len = self.n_t() * self.dim;
        &self.observations[n * len..(n + 1) * len]
    }

    pub fn frame(&self, n: usize, t: usize) -> &[f64] {
        let s = self.sequence(n);
        &s[t * self.dim..(t + 1) * self.dim]
    }

    /// Copy with only the listed sequences.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut obs = Vec::with_capacity(idx.len() * self.n_t() * self.dim);
        for &i in idx {
            obs.extend_from_slice(self.sequence(i));
        }
        Dataset {
            observations: obs,
            true_params: idx.iter().map(|&i| self.true_params[i].clone()).collect(),
            ..self.clone()
        }
    }

    /// Copy keeping the first `n_t` frames of every sequence.
    pub fn truncated(&self, n_t: usize) -> Dataset {
        let n_t = n_t.min(self.n_t());
        let mut obs = Vec::with_capacity(self.n_seq() * n_t * self.dim);
        for i in 0..self.n_seq() {
            obs.extend_from_slice(&self.sequence(i)[..n_t * self.dim]);
        }
        Dataset { observations: obs, grid: self.grid.with_len(n_t), ..self.clone() }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_seq() == 0 || self.observations.len() != self.n_seq() * self.n_t() * self.dim {
            return Err(Error::Model("dataset shape is inconsistent".into()));
        }
        if let Some(p) = self.observations.iter().position(|v| !v.is_finite()) {
            return Err(Error::Sequence {
                index: p / (self.n_t() * self.dim),
                source: Box::new(Error::Model("non-finite observation".into())),
            });
        }
        Ok(())
    }
}

/// All three splits of one generated benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DatasetSplits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn sinusoid_value(a: f64, f: f64, phi: f64, t: f64) -> f64 {
    a * (f * t + phi).sin()
}

pub fn lotka_volterra_field(alpha: f64, gamma: f64) -> impl Fn(&[f64]) -> Vec<f64> + Copy {
    move |x: &[f64]| vec![alpha * x[0] - x[0] * x[1] / 2.0, x[0] * x[1] / 5.0 - gamma * x[1]]
}

/// Conserved quantity of the generator's Lotka–Volterra system.
pub fn lotka_volterra_invariant(alpha: f64, gamma: f64, x: &[f64]) -> f64 {
    x[0] / 5.0 - gamma * x[0].ln() + x[1] / 2.0 - alpha * x[1].ln()
}

/// Noiseless trajectory on `grid`, RK4 with 20 substeps per interval.
pub fn lotka_volterra_trajectory(alpha: f64, gamma: f64, x0: [f64; 2], grid: &TimeGrid) -> Result<Vec<Vec<f64>>> {
    let spec = SolverSpec::rk4(grid.dt / 20.0);
    Ok(odeint::integrate(lotka_volterra_field(alpha, gamma), &x0, grid, &spec)?)
}

fn split_rng(seed: u64, split: Split) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(split.stream());
    rng
}

/// Generates one split; each split draws from its own ChaCha stream.
pub fn gen_split(cfg: &GenConfig, split: Split) -> Result<Dataset> {
    cfg.validate()?;
    let grid = TimeGrid::new(0.0, cfg.dt, cfg.len(split))?;
    let n_seq = cfg.count(split);
    let dim = cfg.kind.dim();
    let mut rng = split_rng(cfg.seed, split);
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::config("dataset.sigma", e.to_string()))?;
    let mut observations = Vec::with_capacity(n_seq * grid.n_points * dim);
    let mut true_params = Vec::with_capacity(n_seq);

    for n in 0..n_seq {
        let clean: Vec<f64> = match cfg.kind {
            DatasetKind::Sinusoid | DatasetKind::SinusoidContent => {
                let a = Uniform::new(1.0, 3.0).sample(&mut rng);
                let f = Uniform::new(0.5, 1.0).sample(&mut rng);
                let phi = Uniform::new(0.0, 1.0).sample(&mut rng);
                let mut params = vec![a, f, phi];
                let b = if cfg.kind == DatasetKind::SinusoidContent {
                    let b = Uniform::new(-1.0, 1.0).sample(&mut rng);
                    params.push(b);
                    Some(b)
                } else {
                    None
                };
                true_params.push(params);
                (0..grid.n_points)
                    .flat_map(|i| {
                        let x = sinusoid_value(a, f, phi, grid.time(i));
                        std::iter::once(x).chain(b)
                    })
                    .collect()
            }
            DatasetKind::LotkaVolterra => {
                let alpha = rng.gen_range(0.1..0.4);
                let gamma = rng.gen_range(0.1..0.4);
                let x0 = [rng.gen_range(2.0..10.0), rng.gen_range(2.0..10.0)];
                true_params.push(vec![alpha, gamma, x0[0], x0[1]]);
                lotka_volterra_trajectory(alpha, gamma, x0, &grid)
                    .map_err(|e| Error::Sequence { index: n, source: Box::new(e) })?
                    .concat()
            }
        };
        observations.extend(clean.into_iter().map(|x| x + noise.sample(&mut rng)));
    }

    let ds = Dataset {
        kind: cfg.kind,
        split,
        grid,
        dim,
        observations,
        true_params,
        noise_sigma: cfg.sigma,
        config: *cfg,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn generate(cfg: &GenConfig) -> Result<DatasetSplits> {
    Ok(DatasetSplits {
        train: gen_split(cfg, Split::Train)?,
        val: gen_split(cfg, Split::Val)?,
        test: gen_split(cfg, Split::Test)?,
    })
}

pub fn gen_sinusoid(cfg: &GenConfig) -> Result<DatasetSplits> {
    generate(&GenConfig { kind: DatasetKind::Sinusoid, ..*cfg })
}

pub fn gen_lotka_volterra(cfg: &GenConfig) -> Result<DatasetSplits> {
    generate(&GenConfig { kind: DatasetKind::LotkaVolterra, ..*cfg })
}

pub fn gen_sinusoid_with_content(cfg: &GenConfig) -> Result<DatasetSplits> {
    generate(&GenConfig { kind: DatasetKind::SinusoidContent, ..*cfg })
}

fn kind_name(kind: DatasetKind) -> &'static str {
    match kind {
        DatasetKind::Sinusoid => "sinusoid",
        DatasetKind::LotkaVolterra => "lotka_volterra",
        DatasetKind::SinusoidContent => "sinusoid_content",
    }
}

/// Observations followed by the per-sequence generator parameters.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let header = json!({
        "dataset": kind_name(ds.kind),
        "n_seq": ds.n_seq(),
        "n_t": ds.n_t(),
        "dim": ds.dim,
        "t0": ds.grid.t0,
        "dt": ds.grid.dt,
        "sigma": ds.noise_sigma,
        "seed": ds.config.seed,
        "split": ds.split,
        "param_names": ds.kind.param_names(),
        "config": ds.config,
    });
    let mut payload = ds.observations.clone();
    for p in &ds.true_params {
        payload.extend_from_slice(p);
    }
    container::write(path, "dataset", DATASET_VERSION, header, &payload)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (h, payload) = container::read(path, "dataset", DATASET_VERSION)?;
    let fmt = |msg: &str| Error::Format { path: path.into(), msg: msg.into() };
    let get_usize = |k: &str| h.get(k).and_then(|v| v.as_u64()).map(|v| v as usize).ok_or_else(|| fmt(k));
    let get_f64 = |k: &str| h.get(k).and_then(|v| v.as_f64()).ok_or_else(|| fmt(k));
    let (n_seq, n_t, dim) = (get_usize("n_seq")?, get_usize("n_t")?, get_usize("dim")?);
    let config: GenConfig =
        serde_json::from_value(h["config"].clone()).map_err(|e| fmt(&format!("config: {e}")))?;
    let split: Split = serde_json::from_value(h["split"].clone()).map_err(|e| fmt(&format!("split: {e}")))?;
    let n_params = config.kind.param_names().len();
    let n_obs = n_seq * n_t * dim;
    if payload.len() != n_obs + n_seq * n_params || dim != config.kind.dim() {
        return Err(fmt("payload size does not match header shapes"));
    }
    let grid = TimeGrid::new(get_f64("t0")?, get_f64("dt")?, n_t)?;
    let true_params = payload[n_obs..].chunks(n_params).map(|c| c.to_vec()).collect();
    Ok(Dataset {
        kind: config.kind,
        split,
        grid,
        dim,
        observations: payload[..n_obs].to_vec(),
        true_params,
        noise_sigma: get_f64("sigma")?,
        config,
    })
}
