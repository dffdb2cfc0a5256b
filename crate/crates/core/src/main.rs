use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use znl::harness::{self, inspect, ExperimentConfig};
use znl::nn::Preset;
use znl::transforms::TransformKind;

#[derive(Parser)]
#[command(name = "znl", version, about = "Gradient z-score normalization experiments on residual networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cap on training examples.
        #[arg(long)]
        train_limit: Option<usize>,
    },
    /// Run every (transform, seed) pair and write a report.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        transforms: Vec<TransformKind>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every gradient of a preset against finite differences.
    Gradcheck {
        #[arg(long)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print per-block overlap statistics of a finished run.
    InspectOverlap {
        #[arg(long)]
        run: PathBuf,
    },
}

fn init_threads() -> Result<()> {
    let threads = match std::env::var("ZNL_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("ZNL_THREADS must be a positive integer, got `{v}`"))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the thread pool")
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn main() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    init_threads()?;
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            train_limit,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if train_limit.is_some() {
                cfg.train_limit = train_limit;
            }
            cfg.validate()?;
            let summary = harness::run(&cfg)?;
            if let Some(last) = summary.metrics.last() {
                println!(
                    "epoch {}: train_loss {:.4} train_acc {:.4}",
                    last.epoch, last.train_loss, last.train_acc
                );
            }
            if let Some(acc) = summary.manifest.final_train_acc {
                println!("final train accuracy (eval mode) {acc:.4}");
            }
            println!("run directory {}", summary.dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare {
            config,
            transforms,
            seeds,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let report = harness::compare(&cfg, &transforms, &seeds)?;
            let md = std::fs::read_to_string(report.dir.join(harness::compare::REPORT_MD))?;
            print!("{md}");
            let failed = report.cells.iter().filter(|c| c.failure.is_some()).count();
            if failed > 0 {
                eprintln!("{failed} run(s) failed");
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { preset, seed } => {
            let report = harness::gradcheck(preset, seed)?;
            println!("{report}");
            if report.passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                for k in report.failures() {
                    eprintln!("gradient mismatch in {}: {}", k.kind, k.worst);
                }
                Ok(ExitCode::FAILURE)
            }
        }
        Command::InspectOverlap { run } => {
            let rows = harness::inspect_overlap(&run)?;
            if rows.is_empty() {
                bail!("{} has no overlap records", run.display());
            }
            print!("{}", inspect::format_table(&rows));
            Ok(ExitCode::SUCCESS)
        }
    }
}
