mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Layerwise adversarial training experiments.
#[derive(Debug, Parser)]
#[command(name = "lwat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Overrides the config seed (training) or the sampling seed (analysis).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for work that splits into independent pieces.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Recompute even when the artifacts for this exact setup exist.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train { config: PathBuf },
    /// Accuracy of a checkpoint under an attack over a list of ε.
    Eval {
        checkpoint: PathBuf,
        /// Config describing the data; defaults to the one saved beside the
        /// checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "fgs-input")]
        attack: String,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        eps: Vec<f64>,
        /// Test batch size for the attack.
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
    /// Averaged singular-value spectrum of the encoder Jacobian.
    Spectrum {
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 50)]
        top_k: usize,
    },
    /// First-order perturbation bound at random test points.
    Bound {
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Run a desk-scale reproduction recipe end to end.
    Repro(commands::ReproArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train { config } => commands::train(&config, &cli.common),
        Command::Eval {
            checkpoint,
            config,
            attack,
            eps,
            batch,
        } => commands::eval(
            &checkpoint,
            config.as_deref(),
            &attack,
            &eps,
            batch,
            &cli.common,
        ),
        Command::Spectrum {
            checkpoint,
            config,
            samples,
            top_k,
        } => commands::spectrum(&checkpoint, config.as_deref(), samples, top_k, &cli.common),
        Command::Bound {
            checkpoint,
            config,
            trials,
        } => commands::bound(&checkpoint, config.as_deref(), trials, &cli.common),
        Command::Repro(args) => commands::repro(&args, &cli.common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(run::exit_code(&e))
        }
    }
}
