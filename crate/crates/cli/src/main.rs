//! `covt` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "covt", version, about = "Train and verify the covt CNN/transformer hybrid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct RunFlags {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset: covid-xray or covid5k.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Model preset: covt-s, covt-t, micro or tiny.
    #[arg(long)]
    pub variant: Option<String>,
    /// Class-folder image directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation class-folder directory.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, overrides_with = "no_mixup")]
    pub mixup: bool,
    #[arg(long, overrides_with = "mixup")]
    pub no_mixup: bool,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoints and the resolved config.
    Train {
        #[command(flatten)]
        run: RunFlags,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Report top-1/top-5 and the confusion matrix of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Class-folder directory; defaults to a synthetic set.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference gradient checks over every registered op.
    Gradcheck {
        /// Only run cases whose name contains this string.
        #[arg(long)]
        op: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Parameter and MAC counts and the stem receptive-field table.
    Inspect {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        stem_stride: Option<usize>,
        /// Confirm receptive fields with a gradient-sparsity probe.
        #[arg(long)]
        probe: bool,
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic class-folder dataset as PNG files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        n_per_class: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("COVT_THREADS") else { return Ok(()) };
    let n: usize = v.parse().map_err(|_| format!("COVT_THREADS must be a positive integer, got {v:?}"))?;
    if n == 0 {
        return Err("COVT_THREADS must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Train { run, resume, json } => commands::train(&run, resume.as_deref(), json),
        Command::Eval { checkpoint, data, seed, json } => commands::eval(&checkpoint, data.as_deref(), seed, json),
        Command::Gradcheck { op, json } => commands::gradcheck(op.as_deref(), json),
        Command::Inspect { run, checkpoint, stem_stride, probe, json } => {
            commands::inspect(&run, checkpoint.as_deref(), stem_stride, probe, json)
        }
        Command::Synth { out, n_per_class, classes, size, noise, seed } => {
            commands::synth(&out, n_per_class, classes, size, noise, seed)
        }
    };
    match result {
        Ok(code) => code,
        Err(e @ covt::Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
