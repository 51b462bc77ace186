use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};

use clap::{Args, Parser, Subcommand};
use inode_core::experiment::{self, AblationRun, Axis, ExperimentConfig};
use inode_core::{Error, Result};

#[derive(Parser)]
#[command(name = "inode-lab", version, about = "Latent ODE experiments with time-invariant variables")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override: the dataset seed for `generate`, the training seed otherwise.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/val/test datasets.
    Generate(Common),
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the run's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a trained model and export CSVs.
    Eval(Common),
    /// Sweep one axis over its grid and several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// n_train, t_inv, solver, dims or lambda.
        #[arg(long)]
        axis: String,
        /// Number of runs executed concurrently in child processes.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
}

fn load(common: &Common, seed_target: SeedTarget) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = common.seed {
        match seed_target {
            SeedTarget::Dataset => {
                let g = cfg.dataset.as_mut().ok_or_else(|| Error::config("dataset", "--seed needs a `dataset` section"))?;
                g.seed = seed;
            }
            SeedTarget::Train => cfg.train.seed = seed,
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Copy)]
enum SeedTarget {
    Dataset,
    Train,
}

fn spawn(exe: &Path, sub: &str, config: &Path) -> Result<Child> {
    Command::new(exe)
        .arg(sub)
        .arg("--config")
        .arg(config)
        .spawn()
        .map_err(|e| Error::io(exe, e))
}

fn wait(mut child: Child, run: &AblationRun) -> Result<()> {
    let status = child.wait().map_err(|e| Error::io("child process", e))?;
    if status.success() {
        Ok(())
    } else {
        Err(Error::Model(format!("run {} seed {} failed ({status})", run.setting, run.seed)))
    }
}

/// Runs each job as `train` then `eval` in a child process, at most `width` at a time.
fn run_parallel(runs: &[AblationRun], width: usize) -> Result<()> {
    let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
    let paths = runs.iter().map(experiment::write_run_config).collect::<Result<Vec<_>>>()?;
    for (batch, batch_paths) in runs.chunks(width).zip(paths.chunks(width)) {
        let children = batch_paths.iter().map(|p| spawn(&exe, "train", p)).collect::<Result<Vec<_>>>()?;
        for (c, r) in children.into_iter().zip(batch) {
            wait(c, r)?;
        }
        let children = batch_paths.iter().map(|p| spawn(&exe, "eval", p)).collect::<Result<Vec<_>>>()?;
        for (c, r) in children.into_iter().zip(batch) {
            wait(c, r)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Generate(common) => {
            let cfg = load(&common, SeedTarget::Dataset)?;
            let m = experiment::cmd_generate(&cfg)?;
            for s in &m.splits {
                println!("{}: {} sequences x {} frames", s.split, s.n_seq, s.n_t);
            }
            println!("wrote {}", cfg.data_dir().display());
        }
        Cmd::Train { common, resume } => {
            let cfg = load(&common, SeedTarget::Train)?;
            let out = experiment::cmd_train(&cfg, resume)?;
            let best = out.best.state.best_val_mse.unwrap_or(f64::NAN);
            println!(
                "{} steps, best val mse {best:.6} at epoch {}{}",
                out.last.state.step,
                out.best.state.epoch,
                if out.stopped_early { " (early stop)" } else { "" }
            );
            println!("wrote {}", cfg.run_dir().display());
        }
        Cmd::Eval(common) => {
            let cfg = load(&common, SeedTarget::Train)?;
            let out = experiment::cmd_eval(&cfg)?;
            for r in &out.metrics {
                println!("{:>4} ({:>4} frames): mse {:.6} +- {:.6}", r.horizon_label, r.horizon_len, r.mse, r.mse_std);
            }
            if !out.failed.is_empty() {
                eprintln!("warning: {} sequences failed to integrate: {:?}", out.failed.len(), out.failed);
            }
            if let Some((within, between)) = out.similarity {
                println!("similarity within {within:.4} between {between:.4}");
            }
        }
        Cmd::Ablate { common, axis, parallel } => {
            let cfg = load(&common, SeedTarget::Train)?;
            let axis = Axis::parse(&axis)?;
            if parallel == 0 {
                return Err(Error::config("parallel", "must be >= 1"));
            }
            let runs = experiment::ablation_plan(&cfg, axis)?;
            experiment::prepare_ablation_data(&cfg, &runs)?;
            if parallel == 1 {
                for r in &runs {
                    experiment::run_ablation_job(r)?;
                }
            } else {
                run_parallel(&runs, parallel)?;
            }
            for s in experiment::summarize_ablation(&cfg, axis, &runs)? {
                println!("{} = {}: {:.6} +- {:.6} ({} seeds)", axis.name(), s.setting, s.mean_mse, s.std_mse, s.n_seeds);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
