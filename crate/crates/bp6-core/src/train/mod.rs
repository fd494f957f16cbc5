//! Training: loss stack, optimizer, and the deterministic fit loop.

mod adam;
mod loss;

pub use adam::Adam;
pub use loss::{
    contrastive_loss, contrastive_loss_with, cosine_sim, modality_pairs, mse_loss, pair_infonce,
    pair_infonce_with, sample_negatives, total_loss, Diagnostics, LossConfig, LossParts,
};

use crate::nn::{BpModel, Ctx, ModalBatch, NnError, MODALITY_CHANNELS};
use crate::tensor::{Mode, Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::cell::RefCell;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("batch of {batch} cannot supply {k} distinct negative partners (needs {})", k + 1)]
    BatchTooSmall { batch: usize, k: usize },
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}: \
         mse={mse}, contrastive={contrastive}, total={total}"
    )]
    NonFinite {
        epoch: usize,
        batch: usize,
        mse: f64,
        contrastive: f64,
        total: f64,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Optimization hyperparameters. Defaults are the reference protocol.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 24,
            learning_rate: 3e-4,
            epochs: 100,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

/// One labelled six-modal window: blocks of shape `(channels, input_len)`
/// in canonical modality order, target `(sbp, dbp)` in mmHg.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub blocks: [Tensor; 6],
    pub target: [f64; 2],
}

/// Stacks the selected samples into one `(B, C, L)` batch per modality plus
/// the `(B, 2)` target tensor.
pub fn assemble_batch(
    samples: &[TrainSample],
    indices: &[usize],
) -> Result<(ModalBatch, Tensor), TrainError> {
    if indices.is_empty() {
        return Err(TrainError::InvalidConfig("empty batch".into()));
    }
    let b = indices.len();
    let mut blocks: Vec<Tensor> = Vec::with_capacity(6);
    for m in 0..6 {
        let first = samples[indices[0]].blocks[m].shape().to_vec();
        if first.len() != 2 || first[0] != MODALITY_CHANNELS[m] {
            return Err(TrainError::Tensor(TensorError::ShapeMismatch {
                op: "assemble_batch",
                detail: format!(
                    "modality {m}: expected ({}, L), got {:?}",
                    MODALITY_CHANNELS[m], first
                ),
            }));
        }
        let mut data = Vec::with_capacity(b * first[0] * first[1]);
        for &i in indices {
            let t = &samples[i].blocks[m];
            if t.shape() != first.as_slice() {
                return Err(TrainError::Tensor(TensorError::ShapeMismatch {
                    op: "assemble_batch",
                    detail: format!("modality {m}: {:?} vs {:?}", t.shape(), first),
                }));
            }
            data.extend_from_slice(t.data());
        }
        blocks.push(Tensor::from_vec(&[b, first[0], first[1]], data)?);
    }
    let mut targets = Vec::with_capacity(b * 2);
    for &i in indices {
        targets.extend_from_slice(&samples[i].target);
    }
    let target = Tensor::from_vec(&[b, 2], targets)?;
    let [ecg, ppg, lc, temp, acc, gyro]: [Tensor; 6] = blocks.try_into().expect("six blocks");
    Ok((ModalBatch { ecg, ppg, lc, temp, acc, gyro }, target))
}

/// Eval-mode predictions for a sample list, batched; returns `(sbp, dbp)`
/// per sample in input order.
pub fn predict(
    model: &BpModel,
    samples: &[TrainSample],
    batch_size: usize,
) -> Result<Vec<[f64; 2]>, TrainError> {
    if batch_size == 0 {
        return Err(TrainError::InvalidConfig("batch size must be positive".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    let indices: Vec<usize> = (0..samples.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (batch, _) = assemble_batch(samples, chunk)?;
        let tape = Tape::new();
        let binding = model.params.bind(&tape, false);
        let rng_cell = RefCell::new(ChaCha8Rng::seed_from_u64(0));
        let ctx = Ctx {
            tape: &tape,
            params: &model.params,
            binding: &binding,
            mode: Mode::Eval,
            rng: &rng_cell,
        };
        let pred = tape.value(model.forward(&ctx, &batch)?.pred);
        for row in pred.data().chunks(2) {
            out.push([row[0], row[1]]);
        }
    }
    Ok(out)
}

/// Per-component mean absolute error of predictions against sample targets.
pub fn mae_components(preds: &[[f64; 2]], samples: &[TrainSample]) -> (f64, f64) {
    let n = preds.len().max(1) as f64;
    let (mut sbp, mut dbp) = (0.0, 0.0);
    for (p, s) in preds.iter().zip(samples) {
        sbp += (p[0] - s.target[0]).abs();
        dbp += (p[1] - s.target[1]).abs();
    }
    (sbp / n, dbp / n)
}

/// One row of the per-epoch metrics log. `epoch` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_mse: f64,
    pub train_contrastive: f64,
    pub train_total: f64,
    pub val_mae_sbp: f64,
    pub val_mae_dbp: f64,
}

pub struct FitResult {
    pub log: Vec<EpochRow>,
    /// 1-based epoch whose validation MAE was lowest; the model holds that
    /// epoch's parameters on return.
    pub best_epoch: usize,
    /// Mean of the best epoch's SBP and DBP validation MAE.
    pub best_val_mae: f64,
    pub optimizer_steps: u64,
    pub zero_norm_similarities: u64,
    pub lambda_contrastive: f64,
}

struct Snapshot {
    params: Vec<Tensor>,
    buffers: Vec<Tensor>,
}

fn take_snapshot(model: &BpModel) -> Snapshot {
    Snapshot {
        params: model.params.iter_params().map(|(_, t)| t.clone()).collect(),
        buffers: model
            .params
            .iter_buffers()
            .map(|(_, c)| c.borrow().clone())
            .collect(),
    }
}

fn restore_snapshot(model: &mut BpModel, snap: &Snapshot) -> Result<(), TrainError> {
    let ids: Vec<_> = model.params.param_ids().collect();
    for (id, value) in ids.into_iter().zip(&snap.params) {
        model.params.set_param(id, value.clone())?;
    }
    for ((_, cell), value) in model.params.iter_buffers().zip(&snap.buffers) {
        *cell.borrow_mut() = value.clone();
    }
    Ok(())
}

/// Trains `model` on `train`, tracking validation MAE after every epoch and
/// restoring the best-validation parameters before returning. Deterministic
/// for a given seed: shuffling, dropout masks, and negative sampling all
/// draw from one seeded generator.
pub fn fit(
    model: &mut BpModel,
    train: &[TrainSample],
    val: &[TrainSample],
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
) -> Result<FitResult, TrainError> {
    lcfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::InvalidConfig("empty training set".into()));
    }
    if val.is_empty() {
        return Err(TrainError::InvalidConfig("empty validation set".into()));
    }
    if tcfg.epochs == 0 {
        return Err(TrainError::InvalidConfig("need at least one epoch".into()));
    }
    if !(tcfg.learning_rate > 0.0) {
        return Err(TrainError::InvalidConfig(format!(
            "learning rate must be positive, got {}",
            tcfg.learning_rate
        )));
    }
    if tcfg.batch_size < lcfg.k_negatives + 1 {
        return Err(TrainError::BatchTooSmall {
            batch: tcfg.batch_size,
            k: lcfg.k_negatives,
        });
    }

    let mut adam = Adam::new(
        &model.params,
        tcfg.learning_rate,
        tcfg.adam_beta1,
        tcfg.adam_beta2,
        tcfg.adam_eps,
    );
    let rng_cell = RefCell::new(ChaCha8Rng::seed_from_u64(tcfg.seed));
    let diag = Diagnostics::default();
    let mut log_rows = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(usize, f64, Snapshot)> = None;
    let mut indices: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=tcfg.epochs {
        indices.shuffle(&mut *rng_cell.borrow_mut());
        let (mut mse_acc, mut contr_acc, mut total_acc, mut rows) = (0.0, 0.0, 0.0, 0usize);
        for (batch_idx, chunk) in indices.chunks(tcfg.batch_size).enumerate() {
            if chunk.len() < lcfg.k_negatives + 1 {
                // A short trailing chunk cannot supply the negatives;
                // skipped, the shuffle redistributes samples next epoch.
                log::debug!(
                    "epoch {epoch}: dropping trailing batch of {} samples",
                    chunk.len()
                );
                continue;
            }
            let (batch, target) = assemble_batch(train, chunk)?;
            let tape = Tape::new();
            let binding = model.params.bind(&tape, true);
            let ctx = Ctx {
                tape: &tape,
                params: &model.params,
                binding: &binding,
                mode: Mode::Train,
                rng: &rng_cell,
            };
            let out = model.forward(&ctx, &batch)?;
            let parts = {
                let mut rng = rng_cell.borrow_mut();
                total_loss(
                    &tape,
                    out.pred,
                    &target,
                    &out.embeddings,
                    lcfg,
                    &mut rng,
                    &diag,
                )?
            };
            let mse_v = tape.value(parts.mse).item();
            let contr_v = tape.value(parts.contrastive).item();
            let total_v = tape.value(parts.total).item();
            if !total_v.is_finite() || !mse_v.is_finite() || !contr_v.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: batch_idx,
                    mse: mse_v,
                    contrastive: contr_v,
                    total: total_v,
                });
            }
            tape.backward(parts.total)?;
            let grads: Vec<Option<Tensor>> = model
                .params
                .param_ids()
                .map(|id| tape.grad(binding.var(id)))
                .collect();
            drop(tape);
            adam.step(&mut model.params, &grads)?;

            let w = chunk.len() as f64;
            mse_acc += mse_v * w;
            contr_acc += contr_v * w;
            total_acc += total_v * w;
            rows += chunk.len();
        }
        if rows == 0 {
            return Err(TrainError::InvalidConfig(format!(
                "no usable batches: {} training samples with batch size {} and {} negatives",
                train.len(),
                tcfg.batch_size,
                lcfg.k_negatives
            )));
        }

        let preds = predict(model, val, tcfg.batch_size)?;
        let (val_mae_sbp, val_mae_dbp) = mae_components(&preds, val);
        let row = EpochRow {
            epoch,
            train_mse: mse_acc / rows as f64,
            train_contrastive: contr_acc / rows as f64,
            train_total: total_acc / rows as f64,
            val_mae_sbp,
            val_mae_dbp,
        };
        log::info!(
            "epoch {}: total {:.4}, val mae {:.2}/{:.2}",
            row.epoch,
            row.train_total,
            row.val_mae_sbp,
            row.val_mae_dbp
        );
        let combined = 0.5 * (val_mae_sbp + val_mae_dbp);
        if best.as_ref().map_or(true, |(_, b, _)| combined < *b) {
            best = Some((epoch, combined, take_snapshot(model)));
        }
        log_rows.push(row);
    }

    let (best_epoch, best_val_mae, snap) = best.expect("at least one epoch ran");
    restore_snapshot(model, &snap)?;
    Ok(FitResult {
        log: log_rows,
        best_epoch,
        best_val_mae,
        optimizer_steps: adam.step_count(),
        zero_norm_similarities: diag.zero_norm_similarities.get(),
        lambda_contrastive: lcfg.lambda_contrastive,
    })
}
