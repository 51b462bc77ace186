//! Config-driven workflows behind the command-line tool.
//!
//! Directory layout under `out`:
//!
//! ```text
//! data/{train,val,test}.bin, data/manifest.json
//! runs/<variant>-seed<seed>/{checkpoint.bin,last.bin,train_log.csv,config.json}
//! runs/<variant>-seed<seed>/eval/{metrics.csv,per_frame.csv,similarity.csv,pca.csv,explained_variance.csv}
//! ablate/<axis>/{results.csv,summary.csv}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::datagen::{generate, load_dataset, save_dataset, Dataset, GenConfig, Split};
use crate::error::{Error, Result};
use crate::eval::{self, parse_horizons, Horizon, MetricRow};
use crate::model::{load_checkpoint, Pathways, Variant, VariantConfig};
use crate::nets::Activation;
use crate::odeint::{SolverKind, SolverSpec};
use crate::train::{self, RunFiles, TrainConfig};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.json";

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

/// Model settings shared by all variants of an experiment. `t_in` is the
/// initial-state context of the invariant variants; the baseline always
/// conditions on `t_inv` frames so every model sees the same data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    #[serde(default = "default_pathways")]
    pub pathways: Pathways,
    pub q_x: usize,
    pub q_c: usize,
    pub t_in: usize,
    pub t_inv: usize,
    #[serde(default)]
    pub n_e: Option<usize>,
    pub solver: SolverSpec,
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

impl ModelSection {
    pub fn resolve(&self, obs_dim: usize) -> Result<VariantConfig> {
        let node = self.variant == Variant::Node;
        let cfg = VariantConfig {
            variant: self.variant,
            pathways: self.pathways,
            obs_dim,
            q_x: self.q_x,
            q_c: self.q_c,
            t_in: if node { self.t_inv } else { self.t_in },
            t_inv: self.t_inv,
            n_e: self.n_e,
            solver: self.solver.clone(),
            mc_samples: self.mc_samples,
            enc_hidden: self.enc_hidden,
            inv_hidden: self.inv_hidden,
            dyn_hidden: self.dyn_hidden.clone(),
            dec_hidden: self.dec_hidden.clone(),
            activation: self.activation,
        };
        if self.t_in > self.t_inv {
            return Err(Error::config("model.t_in", format!("t_in ({}) exceeds t_inv ({})", self.t_in, self.t_inv)));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn default_horizons() -> String {
    "tin,nt,3nt".into()
}
fn default_samples() -> usize {
    eval::EVAL_SAMPLES
}
fn default_sim_seqs() -> usize {
    25
}
fn default_sim_frames() -> usize {
    16
}
fn default_pca_seqs() -> usize {
    6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_horizons")]
    pub horizons: String,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sim_seqs")]
    pub similarity_sequences: usize,
    #[serde(default = "default_sim_frames")]
    pub similarity_frames: usize,
    #[serde(default = "default_pca_seqs")]
    pub pca_sequences: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        serde_json::from_value(json!({})).expect("defaults")
    }
}

fn default_seeds() -> usize {
    4
}
fn default_ablation_horizon() -> String {
    "3nt".into()
}

/// Sweep settings; unset grids fall back to [`Axis::default_grid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_ablation_horizon")]
    pub horizon: String,
    #[serde(default)]
    pub n_train: Option<Vec<usize>>,
    #[serde(default)]
    pub t_inv: Option<Vec<usize>>,
    #[serde(default)]
    pub solver: Option<Vec<SolverKind>>,
    #[serde(default)]
    pub dims: Option<Vec<(usize, usize)>>,
    #[serde(default)]
    pub lambda: Option<Vec<f64>>,
}

impl Default for AblationSection {
    fn default() -> Self {
        serde_json::from_value(json!({})).expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Generator settings; required unless `data_dir` points at generated data.
    #[serde(default)]
    pub dataset: Option<GenConfig>,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ablation: AblationSection,
    pub out: PathBuf,
}

fn config_error(path: &serde_path_to_error::Path, err: &serde_json::Error) -> Error {
    let mut field = path.to_string();
    let msg = err.to_string();
    // name the missing key itself rather than its parent
    if let Some(rest) = msg.strip_prefix("missing field `") {
        if let Some(name) = rest.split('`').next() {
            field = if field == "." || field.is_empty() { name.to_string() } else { format!("{field}.{name}") };
        }
    }
    let msg = msg.split(" at line ").next().unwrap_or(&msg).to_string();
    Error::config(field, msg)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| config_error(e.path(), e.inner()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(path.into())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset, &self.data_dir) {
            (None, None) => return Err(Error::config("dataset", "either `dataset` or `data_dir` is required")),
            (Some(g), _) => g.validate()?,
            _ => {}
        }
        if let Some(g) = &self.dataset {
            self.model.resolve(g.kind.dim())?;
        }
        self.train.validate()?;
        let lambda = self.train.lambda();
        if self.model.variant != Variant::Sinode && lambda != 0.0 {
            return Err(Error::config(
                "train.lambda",
                format!("variant {} trains without the self-supervised term; lambda must be 0", self.model.variant.name()),
            ));
        }
        parse_horizons(&self.eval.horizons, self.model.t_in, 1)?;
        parse_horizons(&self.ablation.horizon, self.model.t_in, 1)?;
        if self.eval.samples == 0 {
            return Err(Error::config("eval.samples", "must be >= 1"));
        }
        if self.ablation.seeds == 0 {
            return Err(Error::config("ablation.seeds", "must be >= 1"));
        }
        Ok(())
    }

    /// Training settings with the variant's default weight filled in.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if t.lambda.is_none() && self.model.variant == Variant::Sinode {
            t.lambda = Some(1.0);
        }
        t
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join("runs").join(format!("{}-seed{}", self.model.variant.name(), self.train.seed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: GenConfig,
    pub splits: Vec<ManifestSplit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSplit {
    pub split: String,
    pub file: String,
    pub n_seq: usize,
    pub n_t: usize,
    pub dim: usize,
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(v).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.clone())
        } else {
            Error::io(&path, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path, msg: e.to_string() })
}

/// Generates every split into `dir` and records a manifest.
pub fn write_datasets(gen: &GenConfig, dir: &Path) -> Result<Manifest> {
    let splits = generate(gen)?;
    let mut entries = Vec::new();
    for split in Split::ALL {
        let ds = splits.get(split);
        let file = format!("{}.bin", split.name());
        save_dataset(ds, &dir.join(&file))?;
        entries.push(ManifestSplit { split: split.name().into(), file, n_seq: ds.n_seq(), n_t: ds.n_t(), dim: ds.dim });
    }
    let manifest = Manifest { version: crate::datagen::DATASET_VERSION, config: gen.clone(), splits: entries };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let entry = manifest
        .splits
        .iter()
        .find(|s| s.split == split.name())
        .ok_or_else(|| Error::Format { path: dir.join(MANIFEST), msg: format!("no {} split listed", split.name()) })?;
    load_dataset(&dir.join(&entry.file))
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Manifest> {
    let gen = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::config("dataset", "generate needs a `dataset` section"))?;
    write_datasets(gen, &cfg.data_dir())
}

pub fn cmd_train(cfg: &ExperimentConfig, resume: bool) -> Result<train::TrainOutcome> {
    let dir = cfg.data_dir();
    let tr = load_split(&dir, Split::Train)?;
    let va = load_split(&dir, Split::Val)?;
    let model_cfg = cfg.model.resolve(tr.dim)?;
    let run = cfg.run_dir();
    write_json(&run.join(CONFIG_SNAPSHOT), cfg)?;
    train::train(&model_cfg, &tr, &va, &cfg.train_config(), &RunFiles::at(&run, resume))
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub metrics: Vec<MetricRow>,
    pub failed: Vec<usize>,
    pub similarity: Option<(f64, f64)>,
    pub explained: Vec<f64>,
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalOutput> {
    let run = cfg.run_dir();
    let ck = load_checkpoint(&run.join(train::BEST_FILE))?;
    let dir = cfg.data_dir();
    let manifest = read_manifest(&dir)?;
    let test = load_split(&dir, Split::Test)?;
    if test.dim != ck.config.obs_dim {
        return Err(Error::config(
            "model.obs_dim",
            format!("checkpoint was trained on {}-dim data, test split has {}", ck.config.obs_dim, test.dim),
        ));
    }
    let model = ck.model()?;
    let horizons = parse_horizons(&cfg.eval.horizons, cfg.model.t_in, manifest.config.n_t)?;
    let out = run.join("eval");
    let variant = ck.config.variant.name();
    let report = eval::mse_at_horizons(&model, &ck.params, &test, &horizons, cfg.eval.samples, variant, ck.state.seed)?;
    eval::write_metrics_csv(&out.join("metrics.csv"), &report.rows)?;
    eval::write_per_frame_csv(&out.join("per_frame.csv"), &report.per_frame)?;

    let similarity = if ck.config.is_invariant() {
        let n_seq = cfg.eval.similarity_sequences.min(test.n_seq());
        let n_t = cfg.eval.similarity_frames.min(test.n_t());
        let (emb, per_seq) = eval::invariant_embeddings(&model, &ck.params, &test, n_seq, n_t)?;
        let m = eval::cosine_similarity_matrix(&emb);
        eval::write_matrix_csv(&out.join("similarity.csv"), &m.values, per_seq)?;
        Some(eval::block_similarity(&m.values, per_seq))
    } else {
        None
    };

    let len = horizons.iter().map(|h| h.len).max().unwrap_or(1);
    let traj = eval::latent_trajectories(&model, &ck.params, &test, cfg.eval.pca_sequences, len, cfg.eval.samples, cfg.eval.seed)?;
    let points: Vec<Vec<f64>> = traj.iter().flatten().cloned().collect();
    let pca = eval::pca_embed(&points, 2)?;
    eval::write_pca_csv(&out.join("pca.csv"), &pca.projected, len)?;
    eval::write_explained_csv(&out.join("explained_variance.csv"), &pca.explained)?;
    write_json(&out.join(CONFIG_SNAPSHOT), cfg)?;
    Ok(EvalOutput { metrics: report.rows, failed: report.failed, similarity, explained: pca.explained })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    NTrain,
    TInv,
    Solver,
    Dims,
    Lambda,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::NTrain, Axis::TInv, Axis::Solver, Axis::Dims, Axis::Lambda];

    pub fn name(self) -> &'static str {
        match self {
            Axis::NTrain => "n_train",
            Axis::TInv => "t_inv",
            Axis::Solver => "solver",
            Axis::Dims => "dims",
            Axis::Lambda => "lambda",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
            Error::config("axis", format!("unknown axis `{s}`; expected one of {}", names.join(", ")))
        })
    }

    /// Settings swept by default, one JSON value per setting.
    pub fn default_grid(self) -> Vec<Value> {
        match self {
            Axis::NTrain => vec![json!(100), json!(250), json!(500)],
            Axis::TInv => vec![json!(10), json!(20), json!(40), json!(80)],
            Axis::Solver => vec![json!("euler"), json!("rk4"), json!("dopri5")],
            Axis::Dims => [(2, 2), (2, 8), (8, 2), (4, 4), (8, 8), (16, 16)].iter().map(|d| json!(d)).collect(),
            Axis::Lambda => vec![json!(0.0), json!(1.0), json!(10.0), json!(100.0), json!(1000.0)],
        }
    }
}

fn grid_for(axis: Axis, sec: &AblationSection) -> Vec<Value> {
    let custom = match axis {
        Axis::NTrain => sec.n_train.as_ref().map(|v| v.iter().map(|x| json!(x)).collect()),
        Axis::TInv => sec.t_inv.as_ref().map(|v| v.iter().map(|x| json!(x)).collect()),
        Axis::Solver => sec.solver.as_ref().map(|v| v.iter().map(|x| json!(x)).collect()),
        Axis::Dims => sec.dims.as_ref().map(|v| v.iter().map(|x| json!(x)).collect()),
        Axis::Lambda => sec.lambda.as_ref().map(|v| v.iter().map(|x| json!(x)).collect()),
    };
    custom.unwrap_or_else(|| axis.default_grid())
}

fn setting_label(v: &Value) -> String {
    match v {
        Value::Array(a) => a.iter().map(setting_label).collect::<Vec<_>>().join("x"),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One training-and-evaluation job of a sweep.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub setting: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

/// Expands a sweep into standalone run configs sharing one generated
/// dataset. Seeds are `train.seed + k` for `k < ablation.seeds`.
pub fn ablation_plan(cfg: &ExperimentConfig, axis: Axis) -> Result<Vec<AblationRun>> {
    let base_dir = cfg.out.join("ablate").join(axis.name());
    let mut runs = Vec::new();
    for v in grid_for(axis, &cfg.ablation) {
        let label = setting_label(&v);
        for k in 0..cfg.ablation.seeds as u64 {
            let mut c = cfg.clone();
            c.data_dir = Some(cfg.data_dir());
            c.train.seed = cfg.train.seed + k;
            let bad = || Error::config(format!("ablation.{}", axis.name()), format!("bad setting {v}"));
            match axis {
                Axis::NTrain => {
                    let n = v.as_u64().ok_or_else(bad)? as usize;
                    let g = c.dataset.as_mut().ok_or_else(|| Error::config("dataset", "n_train sweeps need `dataset`"))?;
                    if n > g.n_train {
                        return Err(Error::config("ablation.n_train", format!("{n} exceeds dataset.n_train ({})", g.n_train)));
                    }
                    c.data_dir = Some(base_dir.join(format!("data-{n}")));
                    g.n_train = n;
                }
                Axis::TInv => c.model.t_inv = v.as_u64().ok_or_else(bad)? as usize,
                Axis::Solver => {
                    let kind: SolverKind = serde_json::from_value(v.clone()).map_err(|_| bad())?;
                    c.model.solver = SolverSpec { kind, ..c.model.solver.clone() };
                }
                Axis::Dims => {
                    let (qx, qc): (usize, usize) = serde_json::from_value(v.clone()).map_err(|_| bad())?;
                    c.model.q_x = qx;
                    c.model.q_c = qc;
                }
                Axis::Lambda => {
                    c.train.lambda = Some(v.as_f64().ok_or_else(bad)?);
                    c.model.variant = Variant::Sinode;
                }
            }
            c.out = base_dir.join(&label);
            c.eval.horizons = cfg.ablation.horizon.clone();
            c.validate()?;
            runs.push(AblationRun { setting: label.clone(), seed: c.train.seed, config: c });
        }
    }
    Ok(runs)
}

/// Data needed by a sweep: the shared dataset plus any per-setting subsets.
pub fn prepare_ablation_data(cfg: &ExperimentConfig, runs: &[AblationRun]) -> Result<()> {
    let shared = cfg.data_dir();
    if read_manifest(&shared).is_err() {
        cmd_generate(cfg)?;
    }
    for r in runs {
        let dir = r.config.data_dir();
        if dir != shared && read_manifest(&dir).is_err() {
            // a smaller training split is a prefix of the full one
            let gen = r.config.dataset.as_ref().expect("checked by the plan");
            let manifest = read_manifest(&shared)?;
            let mut entries = Vec::new();
            for split in Split::ALL {
                let ds = load_split(&shared, split)?;
                let ds = if split == Split::Train { ds.subset(&(0..gen.n_train).collect::<Vec<_>>()) } else { ds };
                let file = format!("{}.bin", split.name());
                save_dataset(&ds, &dir.join(&file))?;
                entries.push(ManifestSplit { split: split.name().into(), file, n_seq: ds.n_seq(), n_t: ds.n_t(), dim: ds.dim });
            }
            write_json(&dir.join(MANIFEST), &Manifest { version: manifest.version, config: gen.clone(), splits: entries })?;
        }
    }
    Ok(())
}

/// Trains and evaluates one sweep run in this process.
pub fn run_ablation_job(run: &AblationRun) -> Result<()> {
    cmd_train(&run.config, false)?;
    cmd_eval(&run.config)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSummary {
    pub setting: String,
    pub mean_mse: f64,
    pub std_mse: f64,
    pub n_seeds: usize,
}

/// Collects each run's metrics at the sweep horizon and writes
/// `results.csv` and `summary.csv`.
pub fn summarize_ablation(cfg: &ExperimentConfig, axis: Axis, runs: &[AblationRun]) -> Result<Vec<AblationSummary>> {
    let dir = cfg.out.join("ablate").join(axis.name());
    let horizon_label = parse_horizons(&cfg.ablation.horizon, cfg.model.t_in, 1)?[0].label.clone();
    let mut results = Vec::new();
    for r in runs {
        let rows = eval::read_metrics_csv(&r.config.run_dir().join("eval").join("metrics.csv"))?;
        let row = rows
            .into_iter()
            .find(|m| m.horizon_label == horizon_label)
            .ok_or_else(|| Error::MissingArtifact(r.config.run_dir().join("eval").join("metrics.csv")))?;
        results.push((r.setting.clone(), r.seed, row));
    }
    let mut text = String::from("axis,setting,seed,horizon_label,horizon_len,mse\n");
    for (s, seed, m) in &results {
        text += &format!("{},{},{},{},{},{:.8e}\n", axis.name(), s, seed, m.horizon_label, m.horizon_len, m.mse);
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    fs::write(dir.join("results.csv"), text).map_err(|e| Error::io(dir.join("results.csv"), e))?;

    let mut summary: Vec<AblationSummary> = Vec::new();
    for (s, _, m) in &results {
        if !summary.iter().any(|x| &x.setting == s) {
            summary.push(AblationSummary { setting: s.clone(), mean_mse: 0.0, std_mse: 0.0, n_seeds: 0 });
        }
        let _ = m;
    }
    for entry in &mut summary {
        let v: Vec<f64> = results.iter().filter(|(s, _, _)| s == &entry.setting).map(|(_, _, m)| m.mse).collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        *entry = AblationSummary { setting: entry.setting.clone(), mean_mse: mean, std_mse: std, n_seeds: v.len() };
    }
    let mut text = String::from("axis,setting,mean_mse,std_mse,n_seeds\n");
    for s in &summary {
        text += &format!("{},{},{:.8e},{:.8e},{}\n", axis.name(), s.setting, s.mean_mse, s.std_mse, s.n_seeds);
    }
    fs::write(dir.join("summary.csv"), text).map_err(|e| Error::io(dir.join("summary.csv"), e))?;
    Ok(summary)
}

/// Writes each run's resolved config to `<run out>/config-seed<seed>.json` so it can be
/// executed by a separate process.
pub fn write_run_config(run: &AblationRun) -> Result<PathBuf> {
    let path = run.config.out.join(format!("config-seed{}.json", run.seed));
    write_json(&path, &run.config)?;
    Ok(path)
}

/// Sequential sweep: plan, data, every run, summary.
pub fn cmd_ablate(cfg: &ExperimentConfig, axis: Axis) -> Result<Vec<AblationSummary>> {
    let runs = ablation_plan(cfg, axis)?;
    prepare_ablation_data(cfg, &runs)?;
    for r in &runs {
        run_ablation_job(r)?;
    }
    summarize_ablation(cfg, axis, &runs)
}

/// Horizons of `cfg` resolved against its dataset manifest.
pub fn resolved_horizons(cfg: &ExperimentConfig) -> Result<Vec<Horizon>> {
    let m = read_manifest(&cfg.data_dir())?;
    parse_horizons(&cfg.eval.horizons, cfg.model.t_in, m.config.n_t)
}
