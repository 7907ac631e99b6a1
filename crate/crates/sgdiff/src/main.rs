use std::path::PathBuf;

use clap::{Parser, Subcommand};

use sgdiff::config::{self, RunConfig};
use sgdiff::error::{AppError, Result};
use sgdiff::{ablate, checkpoint, dataset, evaluate, gradcheck, sampling, train};

#[derive(Parser)]
#[command(
    name = "sgdiff",
    about = "Scene-graph-conditioned cascaded diffusion on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (PNG ladder + manifest + vocabulary).
    GenerateData {
        /// Config supplying dataset path, count, and seed defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to the config's dataset path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Generation seed; defaults to the config's data seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of samples; defaults to the config's sample count.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train all stages in cascade order.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory override.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoints in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many optimizer steps (checkpointing).
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Sample the cascade for each caption in a file.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Captions file, one caption per line.
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score sampled images against held-out reals.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of images to sample.
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the conditioning/attention flag grid and tabulate it.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Images per row for the FID-proxy column; 0 skips it.
        #[arg(long, default_value_t = 0)]
        fid_samples: usize,
    },
    /// Run the finite-difference battery over all layers.
    GradCheck,
}

fn load(config: &PathBuf, out: Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = config::load_config(config)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData {
            config,
            out,
            seed,
            n,
        } => {
            let cfg = config.map(|p| config::load_config(&p)).transpose()?;
            let out = out
                .or_else(|| cfg.as_ref().map(|c| c.dataset.clone()))
                .ok_or_else(|| {
                    AppError::Config("generate-data needs --out or --config".into())
                })?;
            let seed = seed.or_else(|| cfg.as_ref().map(|c| c.data.seed)).unwrap_or(1);
            let n = n
                .or_else(|| cfg.as_ref().map(|c| c.data.n_samples))
                .unwrap_or(256);
            dataset::write_dataset(&out, seed, n)?;
            println!("wrote {} samples to {}", n, out.display());
        }
        Command::Train {
            config,
            out,
            seed,
            resume,
            max_steps,
        } => {
            let cfg = load(&config, out, seed)?;
            let report = train::train_limited(&cfg, resume, max_steps)?;
            for p in &report.phases {
                println!(
                    "stage {} ({} px): {} steps, loss {:.6} -> {:.6} (best {:.6})",
                    p.stage, p.resolution, p.steps, p.initial_loss, p.final_loss, p.best_loss
                );
            }
            println!("checkpoints in {}", report.out_dir.display());
        }
        Command::Sample {
            config,
            checkpoint,
            captions,
            out,
            seed,
        } => {
            let cfg = load(&config, None, seed)?;
            let out = out.unwrap_or_else(|| cfg.out_dir.join("samples"));
            let store = checkpoint::load_store::<f64>(&checkpoint)?;
            let captions = sampling::read_captions(&captions)?;
            let manifest = sampling::sample_captions(&cfg, &store, &captions, &out)?;
            let ok = manifest.entries.iter().filter(|e| e.ok).count();
            let failed = manifest.entries.len() - ok;
            println!(
                "sampled {} captions into {} ({} failed to parse)",
                ok,
                out.display(),
                failed
            );
            for e in manifest.entries.iter().filter(|e| !e.ok) {
                eprintln!(
                    "caption {} not parsed: {}",
                    e.index,
                    e.error.as_deref().unwrap_or("unknown")
                );
            }
        }
        Command::Evaluate {
            config,
            checkpoint,
            n,
            out,
            seed,
        } => {
            let cfg = load(&config, None, seed)?;
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            let store = checkpoint::load_store::<f64>(&checkpoint)?;
            let report = evaluate::evaluate(&cfg, &store, n)?;
            evaluate::write_report(&out, &report)?;
            for s in &report.stages {
                println!(
                    "stage {} ({} px): FID-proxy {:.4}, IS-proxy {:.4} over {} samples (seed {})",
                    s.stage, s.resolution, s.fid_proxy, s.is_proxy, s.n_samples, s.seed
                );
            }
        }
        Command::Ablate {
            config,
            out,
            seed,
            fid_samples,
        } => {
            let cfg = load(&config, out, seed)?;
            let report = ablate::run_ablation(&cfg, fid_samples)?;
            ablate::write_report(&cfg.out_dir, &report)?;
            print!("{}", ablate::format_table(&report));
        }
        Command::GradCheck => {
            let rows = gradcheck::run_battery()?;
            print!("{}", gradcheck::format_rows(&rows));
            if rows.iter().any(|r| !r.pass()) {
                return Err(AppError::Data("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error[{}]: {}", e.category(), e);
        std::process::exit(e.exit_code());
    }
}
