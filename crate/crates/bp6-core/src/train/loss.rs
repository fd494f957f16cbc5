//! The loss stack: mean squared error on the two pressure targets, a
//! cosine-similarity InfoNCE term over modality-embedding pairs, and their
//! weighted sum.

use super::TrainError;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use std::cell::Cell;

/// Loss hyperparameters. Defaults are the reference operating point.
#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Weight of the contrastive term in the total loss.
    pub lambda_contrastive: f64,
    /// Softmax temperature of the InfoNCE term.
    pub tau: f64,
    /// Negative pairs per anchor.
    pub k_negatives: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_contrastive: 0.3, tau: 0.5, k_negatives: 5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.tau > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        if self.k_negatives == 0 {
            return Err(TrainError::InvalidConfig("need at least one negative".into()));
        }
        if !(self.lambda_contrastive >= 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "contrastive weight must be non-negative, got {}",
                self.lambda_contrastive
            )));
        }
        Ok(())
    }
}

/// Counters for numerically degenerate events that are survived rather
/// than propagated as errors.
#[derive(Debug, Default)]
pub struct Diagnostics {
    /// Times a cosine similarity involved a (near-)zero-norm embedding and
    /// was defined as 0.
    pub zero_norm_similarities: Cell<u64>,
}

const NORM_FLOOR: f64 = 1e-12;

/// `(1/B) sum_i ||pred_i - target_i||^2` over a `(B, 2)` batch.
pub fn mse_loss(tape: &Tape, pred: Var, target: &Tensor) -> Result<Var, TensorError> {
    let shape = tape.shape(pred);
    if shape.len() != 2 || shape != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mse_loss",
            detail: format!("pred {:?} vs target {:?}", shape, target.shape()),
        });
    }
    let batch = shape[0] as f64;
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / batch)
}

/// Cosine similarity between two embedding vectors on the tape. A vector
/// with norm below 1e-12 yields similarity 0 (constant, no gradient) and
/// bumps the diagnostic counter instead of producing NaN.
pub fn cosine_sim(tape: &Tape, u: Var, v: Var, diag: &Diagnostics) -> Result<Var, TensorError> {
    let norm = |var: Var| -> f64 {
        let t = tape.value(var);
        t.data().iter().map(|x| x * x).sum::<f64>().sqrt()
    };
    if norm(u) <= NORM_FLOOR || norm(v) <= NORM_FLOOR {
        diag.zero_norm_similarities.set(diag.zero_norm_similarities.get() + 1);
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let num = tape.dot(u, v)?;
    let nu = tape.l2_norm(u)?;
    let nv = tape.l2_norm(v)?;
    let den = tape.mul(nu, nv)?;
    tape.div(num, den)
}

/// Draws `k` negative partner indices per anchor, uniformly without
/// replacement from the other rows of the batch; requires `batch >= k + 1`.
pub fn sample_negatives(
    rng: &mut ChaCha8Rng,
    batch: usize,
    k: usize,
) -> Result<Vec<Vec<usize>>, TrainError> {
    if batch < k + 1 {
        return Err(TrainError::BatchTooSmall { batch, k });
    }
    Ok((0..batch)
        .map(|i| {
            sample(rng, batch - 1, k)
                .into_iter()
                .map(|j| if j >= i { j + 1 } else { j })
                .collect()
        })
        .collect())
}

/// InfoNCE over one modality pair with externally supplied negative
/// assignments (one index list per anchor row). Row `i` of `anchor` is
/// positive with row `i` of `other` and negative with the listed rows of
/// `other`. Index lists may repeat entries; gradient-check harnesses rely
/// on that to probe small batches.
pub fn pair_infonce_with(
    tape: &Tape,
    anchor: Var,
    other: Var,
    tau: f64,
    negatives: &[Vec<usize>],
    diag: &Diagnostics,
) -> Result<Var, TrainError> {
    let (sa, so) = (tape.shape(anchor), tape.shape(other));
    if sa.len() != 2 || sa != so {
        return Err(TrainError::Tensor(TensorError::ShapeMismatch {
            op: "pair_infonce",
            detail: format!("anchor {sa:?} vs other {so:?}"),
        }));
    }
    let batch = sa[0];
    if negatives.len() != batch {
        return Err(TrainError::InvalidConfig(format!(
            "{} negative lists for batch of {batch}",
            negatives.len()
        )));
    }
    if let Some(&j) = negatives.iter().flatten().find(|&&j| j >= batch) {
        return Err(TrainError::InvalidConfig(format!(
            "negative index {j} out of range for batch of {batch}"
        )));
    }

    let mut total: Option<Var> = None;
    for (i, negs) in negatives.iter().enumerate() {
        let a_i = tape.select_row(anchor, i)?;
        let o_i = tape.select_row(other, i)?;
        let d_pos = cosine_sim(tape, a_i, o_i, diag)?;
        let pos_logit = tape.scale(d_pos, 1.0 / tau)?;
        let mut denom = tape.exp(pos_logit)?;
        for &j in negs {
            let o_j = tape.select_row(other, j)?;
            let d_neg = cosine_sim(tape, a_i, o_j, diag)?;
            let neg_logit = tape.scale(d_neg, 1.0 / tau)?;
            denom = tape.add(denom, tape.exp(neg_logit)?)?;
        }
        let li = tape.sub(tape.log(denom)?, pos_logit)?;
        total = Some(match total {
            Some(t) => tape.add(t, li)?,
            None => li,
        });
    }
    let sum = total.expect("batch validated non-empty by negatives length");
    Ok(tape.scale(sum, 1.0 / batch as f64)?)
}

/// InfoNCE over one modality pair with fresh uniformly sampled negatives.
pub fn pair_infonce(
    tape: &Tape,
    anchor: Var,
    other: Var,
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
    diag: &Diagnostics,
) -> Result<Var, TrainError> {
    let batch = tape.shape(anchor).first().copied().unwrap_or(0);
    let negatives = sample_negatives(rng, batch, cfg.k_negatives)?;
    pair_infonce_with(tape, anchor, other, cfg.tau, &negatives, diag)
}

/// All 15 unordered modality pairs in canonical order `(e,p,l,t,a,g)`,
/// anchored at the first member of each pair.
pub fn modality_pairs() -> impl Iterator<Item = (usize, usize)> {
    (0..6).flat_map(|i| (i + 1..6).map(move |j| (i, j)))
}

/// Mean of [`pair_infonce_with`] over the 15 pairs, with one pre-drawn
/// negative assignment per pair.
pub fn contrastive_loss_with(
    tape: &Tape,
    embeddings: &[Var; 6],
    tau: f64,
    negatives: &[Vec<Vec<usize>>],
    diag: &Diagnostics,
) -> Result<Var, TrainError> {
    if negatives.len() != 15 {
        return Err(TrainError::InvalidConfig(format!(
            "{} negative sets for 15 modality pairs",
            negatives.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (pair_idx, (i, j)) in modality_pairs().enumerate() {
        let term = pair_infonce_with(
            tape,
            embeddings[i],
            embeddings[j],
            tau,
            &negatives[pair_idx],
            diag,
        )?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(tape.scale(total.expect("15 pairs"), 1.0 / 15.0)?)
}

/// Mean InfoNCE over the 15 modality pairs, negatives re-drawn per pair.
pub fn contrastive_loss(
    tape: &Tape,
    embeddings: &[Var; 6],
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
    diag: &Diagnostics,
) -> Result<Var, TrainError> {
    let batch = tape.shape(embeddings[0]).first().copied().unwrap_or(0);
    let negatives: Vec<Vec<Vec<usize>>> = (0..15)
        .map(|_| sample_negatives(rng, batch, cfg.k_negatives))
        .collect::<Result<_, _>>()?;
    contrastive_loss_with(tape, embeddings, cfg.tau, &negatives, diag)
}

/// The three loss nodes of one training step.
pub struct LossParts {
    pub total: Var,
    pub mse: Var,
    pub contrastive: Var,
}

/// `total = mse + lambda * contrastive`.
pub fn total_loss(
    tape: &Tape,
    pred: Var,
    target: &Tensor,
    embeddings: &[Var; 6],
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
    diag: &Diagnostics,
) -> Result<LossParts, TrainError> {
    let mse = mse_loss(tape, pred, target)?;
    let contrastive = contrastive_loss(tape, embeddings, cfg, rng, diag)?;
    let weighted = tape.scale(contrastive, cfg.lambda_contrastive)?;
    let total = tape.add(mse, weighted)?;
    Ok(LossParts { total, mse, contrastive })
}
