mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::ChannelType;
use std::path::PathBuf;
use std::process::ExitCode;

/// Six-modal cuffless blood pressure estimation toolkit.
#[derive(Parser)]
#[command(name = "bp6", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Ingest raw 500 Hz recordings into a preprocessed sample store.
    Preprocess {
        /// Directory of <subject>_<state>.csv recordings.
        #[arg(long)]
        input_dir: PathBuf,
        /// Annotation CSV with per (subject, state) SBP/DBP references.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Output store path.
        #[arg(long)]
        out: PathBuf,
        /// Config file (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed recorded in the sidecar (overrides BP6_SEED and config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a sample store and write checkpoint plus logs.
    Train {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for model.bp6c, metrics.csv, run.json.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the held-out test split of a store.
    Eval {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for report.json and CSV artifacts.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a synthetic labeled sample store.
    Synth {
        /// Number of samples.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Denoise a single-channel signal (one value per line).
    Denoise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        channel_type: ChannelType,
        #[arg(long)]
        out: PathBuf,
        /// Sampling rate of the input signal.
        #[arg(long, default_value_t = 100.0)]
        fs_hz: f64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), commands::AppError> {
    match cli.cmd {
        Cmd::Preprocess { input_dir, annotations, out, config, seed } => commands::cmd_preprocess(
            &input_dir,
            annotations.as_deref(),
            &out,
            config.as_deref(),
            seed,
        ),
        Cmd::Train { store, config, out, seed } => {
            commands::cmd_train(&store, config.as_deref(), &out, seed)
        }
        Cmd::Eval { store, checkpoint, config, out, seed } => {
            commands::cmd_eval(&store, &checkpoint, config.as_deref(), &out, seed)
        }
        Cmd::Synth { n, seed, out, config } => commands::cmd_synth(n, seed, &out, config.as_deref()),
        Cmd::Denoise { input, channel_type, out, fs_hz, config } => {
            commands::cmd_denoise(&input, channel_type, fs_hz, &out, config.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
