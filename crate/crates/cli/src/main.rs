//! Command-line surface: dataset generation, training, evaluation, the
//! ablation driver, zero-shot transfer, inference-iteration sweeps,
//! rendering, and the gradient checks.

use boqsa_core::error::{Error, Result};
use boqsa_core::harness::{
    ablate, evaluate_checkpoint, model_from_checkpoint, render, sweep_iters, train_resumed,
    transfer, Checkpoint, TrainConfig, ALL_CELLS,
};
use boqsa_core::model::e2e_gradcheck;
use boqsa_core::scenegen::{generate, load_dataset, save_dataset, SceneConfig};
use boqsa_core::tensor::gradcheck::op_suite;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "boqsa",
    about = "Slot-attention scene decomposition: train, evaluate, ablate",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key=value config file applied before overrides
    #[arg(long)]
    config: Option<PathBuf>,
    /// base random seed
    #[arg(long)]
    seed: Option<u64>,
    /// worker threads for the ablation driver (runs stay deterministic;
    /// only scheduling changes)
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// trailing config overrides, each `key=value` (a leading `--` on the
    /// key is accepted)
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn build(&self, mut cfg: TrainConfig) -> Result<TrainConfig> {
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let mut tokens = self.overrides.iter().peekable();
        while let Some(tok) = tokens.next() {
            let tok = tok.trim_start_matches("--");
            if let Some((k, v)) = tok.split_once('=') {
                cfg.apply_kv(k, v)?;
            } else if let Some(v) = tokens.next() {
                cfg.apply_kv(tok, v)?;
            } else {
                return Err(Error::Config(format!(
                    "override {tok:?} is missing a value"
                )));
            }
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a sprite-scene dataset
    Gen {
        /// scene preset: sprites2 or sprites4
        #[arg(long, default_value = "sprites4")]
        preset: String,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// continue from a checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on a dataset, writing a CSV metric report
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// replace the refinement count at inference
        #[arg(long)]
        t_override: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and compare init/regime cells with matched seeds
    Ablate {
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// comma-separated cells (default: all six)
        #[arg(long)]
        cells: Option<String>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Zero-shot evaluation of a checkpoint on another dataset
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate one checkpoint across a range of inference iterations
    SweepIters {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        t_min: usize,
        #[arg(long, default_value_t = 5)]
        t_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render input / reconstruction / slot-mask panels as PNGs
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference verification of every op and the 8px pipeline
    Gradcheck {
        /// random instances per op
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Gen {
            preset,
            count,
            seed,
            out,
        } => {
            let cfg = SceneConfig::preset(&preset, seed)?;
            let samples = generate(&cfg, count)?;
            save_dataset(&samples, &cfg, &out)?;
            println!(
                "wrote {count} samples ({preset}, seed {seed}) to {}",
                out.display()
            );
        }
        Command::Train {
            data,
            out,
            resume,
            config,
        } => {
            let (samples, scene_cfg) = load_dataset(&data)?;
            let mut base = TrainConfig::desk(scene_cfg.max_sprites + 1);
            base.image_size = scene_cfg.image_size;
            let cfg = config.build(base)?;
            let resume_ck = match &resume {
                Some(p) => Some(Checkpoint::load(p)?),
                None => None,
            };
            println!(
                "training {} for {} steps on {} samples (seed {})",
                cfg.cell_name(),
                cfg.max_steps,
                samples.len(),
                cfg.seed
            );
            let outcome = train_resumed(&cfg, &samples, &out, resume_ck.as_ref())?;
            for l in &outcome.log {
                println!(
                    "step={} loss={:.6} lr={:.3e} sigma={:.3} ms={:.1}",
                    l.step, l.loss, l.lr, l.sigma, l.millis
                );
            }
            println!("checkpoint: {}", outcome.final_checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            t_override,
            seed,
        } => {
            let (samples, _) = load_dataset(&data)?;
            let report = evaluate_checkpoint(&checkpoint, &samples, t_override, seed, "eval")?;
            std::fs::write(&out, report.to_csv()).map_err(|e| Error::io(&out, e))?;
            print_summary(&report);
            println!("report: {}", out.display());
        }
        Command::Ablate {
            train_data,
            eval_data,
            out,
            cells,
            seeds,
            config,
        } => {
            let (train_samples, scene_cfg) = load_dataset(&train_data)?;
            let (eval_samples, _) = load_dataset(&eval_data)?;
            let mut base = TrainConfig::desk(scene_cfg.max_sprites + 1);
            base.image_size = scene_cfg.image_size;
            let threads = config.threads;
            let cfg = config.build(base)?;
            let cell_list: Vec<String> = match cells {
                Some(s) => s.split(',').map(|c| c.trim().to_string()).collect(),
                None => ALL_CELLS.iter().map(|c| c.to_string()).collect(),
            };
            let cell_refs: Vec<&str> = cell_list.iter().map(|s| s.as_str()).collect();
            let table = ablate(
                &cfg,
                &cell_refs,
                seeds,
                threads,
                &train_samples,
                &eval_samples,
                &out,
            )?;
            print!("{}", table.render_text());
            println!("table: {}", out.join("ablation.csv").display());
        }
        Command::Transfer {
            checkpoint,
            data,
            out,
            seed,
        } => {
            let (samples, _) = load_dataset(&data)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let (_, model) = model_from_checkpoint(&ck)?;
            let source = checkpoint
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "source".into());
            let target = data
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "target".into());
            let report = transfer(&model, &samples, seed, &source, &target)?;
            std::fs::write(&out, report.to_csv()).map_err(|e| Error::io(&out, e))?;
            println!("transfer {}:", report.tag);
            print_summary(&report);
        }
        Command::SweepIters {
            checkpoint,
            data,
            out,
            t_min,
            t_max,
            seed,
        } => {
            let (samples, _) = load_dataset(&data)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let (_, model) = model_from_checkpoint(&ck)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for (t, report) in sweep_iters(&model, &samples, t_min, t_max, seed)? {
                let path = out.join(format!("sweep_t{t}.csv"));
                std::fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
                println!(
                    "T_test={t}: ari_fg {:.4} msc_fg {:.4} miou {:.4}",
                    report.mean("ari_fg"),
                    report.mean("msc_fg"),
                    report.mean("miou")
                );
            }
        }
        Command::Render {
            checkpoint,
            data,
            out,
            count,
            seed,
        } => {
            let (samples, _) = load_dataset(&data)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let (_, model) = model_from_checkpoint(&ck)?;
            render(&model, &samples, &out, count, seed)?;
            println!(
                "wrote {} renders to {}",
                count.min(samples.len()),
                out.display()
            );
        }
        Command::Gradcheck { instances, seed } => {
            let ops = op_suite(seed, instances, 1e-4);
            for line in ops.lines() {
                println!("{line}");
            }
            let e2e = e2e_gradcheck(seed, 0.02, 1e-3)?;
            for line in e2e.lines() {
                println!("{line}");
            }
            if !(ops.all_pass() && e2e.all_pass()) {
                return Err(Error::Autograd("gradcheck failed".into()));
            }
            println!("all gradient checks passed");
        }
    }
    Ok(())
}

fn print_summary(report: &boqsa_core::metrics::MetricReport) {
    for metric in [
        "ari_fg",
        "msc_fg",
        "miou",
        "dice",
        "mse_per_pixel",
        "mse_slate",
    ] {
        let s = report.summary(metric);
        println!(
            "  {metric:<14} mean {:.4} ± {:.4} over {} images ({} skipped)",
            s.mean, s.stddev, s.count, s.skipped
        );
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
