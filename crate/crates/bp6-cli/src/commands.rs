//! Subcommand implementations and the exit-code policy.
//!
//! Exit codes: 0 success, 2 usage or schema errors, 3 data or numeric
//! failures, 4 training abort.

use crate::config::{ConfigError, RunConfig};
use bp6_core::data::{
    self, assign_labels, ingest_recording, load_store, persist_store, read_annotations,
    split_dataset, synth_generate, to_train_samples, window_recording, write_sidecar, DataError,
    SixModalSample, StoreSidecar,
};
use bp6_core::denoise::{denoise_ecg_with, denoise_ppg_with, DenoiseError};
use bp6_core::dsp::Segment;
use bp6_core::eval::{export_report, EvalError, EvalPair, ReportMeta};
use bp6_core::nn::{load_checkpoint, save_checkpoint, BpModel, CheckpointError, NnError};
use bp6_core::train::{fit, predict, FitResult, TrainError, TrainSample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AppError {
    /// Maps every failure to the documented exit-code classes.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) | AppError::Config(_) | AppError::Nn(_) => 2,
            AppError::Data(e) => match e {
                DataError::MissingChannel { .. }
                | DataError::UnknownColumn { .. }
                | DataError::DuplicateColumn { .. }
                | DataError::BadFileName(_)
                | DataError::BadMotionState(_)
                | DataError::MissingAnnotation { .. }
                | DataError::DuplicateAnnotation { .. }
                | DataError::Unlabeled { .. }
                | DataError::Format(_) => 2,
                _ => 3,
            },
            AppError::Checkpoint(e) => match e {
                CheckpointError::ShapeMismatch { .. }
                | CheckpointError::MissingEntry(_)
                | CheckpointError::UnknownEntry(_)
                | CheckpointError::BadMagic
                | CheckpointError::UnsupportedVersion(_)
                | CheckpointError::BadName => 2,
                _ => 3,
            },
            AppError::Train(e) => match e {
                TrainError::NonFinite { .. } => 4,
                TrainError::InvalidConfig(_) | TrainError::BatchTooSmall { .. } => 2,
                _ => 3,
            },
            AppError::Eval(_) | AppError::Denoise(_) | AppError::Io(_) => 3,
        }
    }
}

/// Seed precedence: explicit flag, then the BP6_SEED environment variable,
/// then the config file.
pub fn effective_seed(flag: Option<u64>, cfg: &RunConfig) -> Result<u64, AppError> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var("BP6_SEED") {
        Ok(text) => text
            .parse()
            .map_err(|_| AppError::Usage(format!("BP6_SEED must be an integer, got {text:?}"))),
        Err(_) => Ok(cfg.seed),
    }
}

pub fn cmd_preprocess(
    input_dir: &Path,
    annotations: Option<&Path>,
    out: &Path,
    config: Option<&Path>,
    seed_flag: Option<u64>,
) -> Result<(), AppError> {
    let cfg = RunConfig::load(config)?;
    cfg.ensure_supported_geometry()?;
    let seed = effective_seed(seed_flag, &cfg)?;

    let annotations_path = annotations
        .map(Path::to_path_buf)
        .or_else(|| cfg.annotations.clone())
        .ok_or_else(|| AppError::Usage("no annotation file given (flag or config)".into()))?;
    let annotations = read_annotations(&annotations_path)?;

    let mut files: Vec<PathBuf> = std::fs::read_dir(input_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(AppError::Usage(format!(
            "no .csv recordings under {}",
            input_dir.display()
        )));
    }

    let mut samples: Vec<SixModalSample> = Vec::new();
    for file in &files {
        let recording = ingest_recording(file)?;
        let windows = window_recording(&recording);
        log::info!(
            "{}/{}: {} windows",
            recording.subject_id,
            recording.motion_state,
            windows.len()
        );
        for window in &windows {
            samples.push(data::preprocess_window_with(window, &cfg.preprocess)?);
        }
    }
    assign_labels(&mut samples, &annotations)?;
    persist_store(&samples, out)?;
    write_sidecar(out, &StoreSidecar::for_samples(&samples, seed, cfg.hash()))?;
    log::info!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

pub fn cmd_synth(
    n: usize,
    seed_flag: Option<u64>,
    out: &Path,
    config: Option<&Path>,
) -> Result<(), AppError> {
    let cfg = RunConfig::load(config)?;
    let seed = effective_seed(seed_flag, &cfg)?;
    if n == 0 {
        return Err(AppError::Usage("--n must be at least 1".into()));
    }
    let samples = synth_generate(n, seed)?;
    persist_store(&samples, out)?;
    write_sidecar(out, &StoreSidecar::for_samples(&samples, seed, cfg.hash()))?;
    log::info!("wrote {n} synthetic samples to {}", out.display());
    Ok(())
}

fn write_metrics_csv(path: &Path, result: &FitResult) -> Result<(), AppError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "epoch,train_mse,train_contrastive,train_total,val_mae_sbp,val_mae_dbp"
    )?;
    for row in &result.log {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            row.epoch,
            row.train_mse,
            row.train_contrastive,
            row.train_total,
            row.val_mae_sbp,
            row.val_mae_dbp
        )?;
    }
    Ok(())
}

pub fn cmd_train(
    store: &Path,
    config: Option<&Path>,
    out_dir: &Path,
    seed_flag: Option<u64>,
) -> Result<(), AppError> {
    let cfg = RunConfig::load(config)?;
    let seed = effective_seed(seed_flag, &cfg)?;
    let samples = load_store(store)?;
    let split = split_dataset(samples, seed)?;
    let train = to_train_samples(&split.train)?;
    let validation = to_train_samples(&split.validation)?;
    log::info!(
        "training on {} samples, validating on {}",
        train.len(),
        validation.len()
    );

    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = BpModel::new(&cfg.model, &mut rng)?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;

    match fit(&mut model, &train, &validation, &tcfg, &cfg.loss) {
        Ok(result) => {
            save_checkpoint(&model.params, &out_dir.join("model.bp6c"))?;
            write_metrics_csv(&out_dir.join("metrics.csv"), &result)?;
            let summary = serde_json::json!({
                "seed": seed,
                "config_hash": cfg.hash(),
                "lambda_contrastive": result.lambda_contrastive,
                "best_epoch": result.best_epoch,
                "best_val_mae": result.best_val_mae,
                "optimizer_steps": result.optimizer_steps,
                "zero_norm_similarities": result.zero_norm_similarities,
            });
            std::fs::write(
                out_dir.join("run.json"),
                serde_json::to_vec_pretty(&summary).expect("static json"),
            )?;
            log::info!(
                "best epoch {} with validation MAE {:.3}",
                result.best_epoch,
                result.best_val_mae
            );
            Ok(())
        }
        Err(TrainError::NonFinite { epoch, batch, mse, contrastive, total }) => {
            let diagnostics = serde_json::json!({
                "seed": seed,
                "config_hash": cfg.hash(),
                "epoch": epoch,
                "batch": batch,
                "mse": mse,
                "contrastive": contrastive,
                "total": total,
            });
            std::fs::write(
                out_dir.join("abort.json"),
                serde_json::to_vec_pretty(&diagnostics).expect("static json"),
            )?;
            Err(TrainError::NonFinite { epoch, batch, mse, contrastive, total }.into())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_eval(
    store: &Path,
    checkpoint: &Path,
    config: Option<&Path>,
    out_dir: &Path,
    seed_flag: Option<u64>,
) -> Result<(), AppError> {
    let cfg = RunConfig::load(config)?;
    let seed = effective_seed(seed_flag, &cfg)?;
    let samples = load_store(store)?;
    let split = split_dataset(samples, seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = BpModel::new(&cfg.model, &mut rng)?;
    load_checkpoint(&mut model.params, checkpoint)?;

    let test: Vec<TrainSample> = to_train_samples(&split.test)?;
    let preds = predict(&model, &test, cfg.train.batch_size)?;
    let pairs: Vec<EvalPair> = preds
        .iter()
        .zip(&test)
        .map(|(p, s)| EvalPair {
            pred_sbp: p[0],
            pred_dbp: p[1],
            ref_sbp: s.target[0],
            ref_dbp: s.target[1],
        })
        .collect();
    let subjects: BTreeSet<&str> = split
        .test
        .iter()
        .map(|s| s.provenance.subject_id.as_str())
        .collect();

    std::fs::create_dir_all(out_dir)?;
    export_report(
        out_dir,
        &pairs,
        subjects.len(),
        &ReportMeta { seed, config_hash: cfg.hash() },
    )?;
    log::info!(
        "evaluated {} test samples from {} subjects into {}",
        pairs.len(),
        subjects.len(),
        out_dir.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ChannelType {
    Ecg,
    Ppg,
}

pub fn cmd_denoise(
    input: &Path,
    channel_type: ChannelType,
    fs_hz: f64,
    out: &Path,
    config: Option<&Path>,
) -> Result<(), AppError> {
    let cfg = RunConfig::load(config)?;
    let text = std::fs::read_to_string(input)?;
    let mut values = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: f64 = line.parse().map_err(|_| {
            AppError::Usage(format!("{}: line {}: not a number: {line:?}", input.display(), idx + 1))
        })?;
        values.push(v);
    }
    let segment = Segment::new(values, fs_hz, "input");
    let denoised = match channel_type {
        ChannelType::Ecg => denoise_ecg_with(&segment, &cfg.preprocess.ecg)?,
        ChannelType::Ppg => {
            denoise_ppg_with(&segment, cfg.preprocess.ppg_cutoff_hz, cfg.preprocess.ppg_order)?
        }
    };
    let mut f = std::fs::File::create(out)?;
    for v in &denoised.values {
        writeln!(f, "{v}")?;
    }
    log::info!("denoised {} samples into {}", denoised.values.len(), out.display());
    Ok(())
}
