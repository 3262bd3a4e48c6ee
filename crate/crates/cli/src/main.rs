use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use simplefold_cli::commands::{self, FoldArgs};
use simplefold_cli::config::RunConfig;
use simplefold_cli::error::exit_code;

#[derive(Parser)]
#[command(name = "simplefold", version, about = "Flow-matching protein folding at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build the feature cache from structure files.
    Featurize {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Directory to featurize instead of `data.train_dir`/`data.eval_dir`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train the folding model from scratch or resume a run.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Continue from a pretrain checkpoint with the finetune loss weighting.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        from: PathBuf,
    },
    /// Train the confidence head against a frozen folding checkpoint.
    TrainPlddt {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        from: PathBuf,
    },
    /// Sample structures for a FASTA or structure file.
    Fold {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Confidence head checkpoint; pLDDT goes into the B-factor column.
        #[arg(long)]
        plddt: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// Per-residue embedding file for models with precomputed conditioning.
        #[arg(long)]
        embedding: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 1)]
        num_samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against references (JSON + CSV).
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Output path without extension.
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Like `eval`, plus one CSV per metric for plotting.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Featurize { cfg, input } => commands::cmd_featurize(&RunConfig::load(&cfg.config)?, input.as_deref()),
        Command::Train { cfg, resume } => commands::cmd_train(&RunConfig::load(&cfg.config)?, resume.as_deref()),
        Command::Finetune { cfg, from } => commands::cmd_finetune(&RunConfig::load(&cfg.config)?, &from),
        Command::TrainPlddt { cfg, from } => commands::cmd_train_plddt(&RunConfig::load(&cfg.config)?, &from),
        Command::Fold {
            cfg,
            checkpoint,
            plddt,
            input,
            embedding,
            tau,
            steps,
            num_samples,
            out,
        } => commands::cmd_fold(
            &RunConfig::load(&cfg.config)?,
            &FoldArgs {
                checkpoint,
                plddt,
                input,
                embedding,
                tau,
                steps,
                num_samples,
                out,
            },
        ),
        Command::Eval {
            config,
            pred,
            reference,
            out,
        } => {
            if let Some(c) = config {
                RunConfig::load(&c)?;
            }
            commands::cmd_eval(&pred, &reference, &out).map(|_| ())
        }
        Command::Report {
            config,
            pred,
            reference,
            out,
        } => {
            if let Some(c) = config {
                RunConfig::load(&c)?;
            }
            commands::cmd_report(&pred, &reference, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
