use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maml_cli::commands;
use maml_cli::{exit_code, ExperimentConfig};
use maml_core::engine::EvalMode;
use maml_core::{Error, Result};

/// Worker threads for data loading, batches and evaluation.
const WORKERS_ENV: &str = "MAML_WORKERS";

#[derive(Parser)]
#[command(name = "maml", version, about = "Modality-aware mutual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Run batch samples sequentially.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset and manifest under the output directory.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
    },
    /// Train the configured model; logs and checkpoints go under the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on the held-out cases.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<output_dir>/checkpoints/last.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `multimodal` or `single:<ID>`.
        #[arg(long)]
        mode: Option<EvalMode>,
    },
    /// Export per-modality attention maps for one case.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "case")]
        case_id: String,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.train.deterministic |= common.deterministic;
    Ok(cfg)
}

fn init_workers() -> Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    init_workers()?;
    match cli.command {
        Command::Synth { common, force } => {
            let s = commands::synth(&load(&common)?, force)?;
            println!(
                "{} cases, {} lesions ({:.2} per case), foreground {:.2}%",
                s.cases,
                s.lesions,
                s.lesions as f64 / s.cases as f64,
                100.0 * s.foreground_fraction
            );
            println!("manifest: {}", s.manifest.display());
        }
        Command::Train { common, force } => {
            let s = commands::train_cmd(&load(&common)?, force)?;
            let loss = s.final_loss.map_or("n/a".into(), |l| format!("{l:.4}"));
            println!("{} epochs, {} steps, final epoch loss {loss}", s.epochs, s.steps);
            println!("checkpoint: {}", s.checkpoint.display());
        }
        Command::Eval { common, checkpoint, mode } => {
            let (report, csv) = commands::eval_cmd(&load(&common)?, checkpoint.as_deref(), mode)?;
            print!("{}", report.to_table());
            println!("report: {}", csv.display());
        }
        Command::ExportAttention { common, checkpoint, case_id } => {
            for p in commands::export_attention_cmd(&load(&common)?, checkpoint.as_deref(), &case_id)? {
                println!("{}", p.display());
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
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
