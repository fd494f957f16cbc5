//! The full six-branch regression model: one temporal-convolution encoder
//! for the cardiac channel, five channel-attention encoders for the other
//! modalities, embeddings fused by concatenation and mapped to systolic and
//! diastolic pressure by a mixture-of-experts head.

use super::encoders::{CacnnEncoder, TcnEncoder};
use super::moe::MoeHead;
use super::{Ctx, NnError, ParamSet};
use crate::tensor::{Tensor, TensorError, Var};
use rand_chacha::ChaCha8Rng;

/// Modalities in canonical fusion order.
pub const MODALITY_NAMES: [&str; 6] = ["ecg", "ppg", "lc", "temp", "acc", "gyro"];

/// Channels per modality, canonical order.
pub const MODALITY_CHANNELS: [usize; 6] = [1, 6, 2, 3, 3, 3];

/// Architecture hyperparameters. `Default` is the full-size network; the
/// `compact` preset keeps the same topology at a fraction of the width so
/// training loops run quickly in tests.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Samples per window after decimation.
    pub input_len: usize,
    /// Per-modality embedding width.
    pub embedding_dim: usize,
    pub num_experts: usize,
    /// Output channels of the three temporal-conv levels.
    pub tcn_channels: Vec<usize>,
    pub tcn_fc_hidden: Vec<usize>,
    pub tcn_dropout: f64,
    /// Output channels of every channel-attention conv level.
    pub cacnn_channels: usize,
    pub cacnn_fc_hidden: Vec<usize>,
    pub cacnn_dropout: f64,
    pub se_reduction: usize,
    pub expert_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_len: 1000,
            embedding_dim: 128,
            num_experts: 4,
            tcn_channels: vec![128, 64, 9],
            tcn_fc_hidden: vec![4096, 2048, 512],
            tcn_dropout: 0.2,
            cacnn_channels: 27,
            cacnn_fc_hidden: vec![512, 512, 256],
            cacnn_dropout: 0.3,
            se_reduction: 9,
            expert_hidden: vec![512, 512, 256],
        }
    }
}

impl ModelConfig {
    /// Same topology, narrow layers. Suitable for fast training smoke tests;
    /// not intended to reach publication accuracy.
    pub fn compact() -> Self {
        Self {
            input_len: 1000,
            embedding_dim: 16,
            num_experts: 2,
            tcn_channels: vec![8, 8, 4],
            tcn_fc_hidden: vec![32],
            tcn_dropout: 0.0,
            cacnn_channels: 9,
            cacnn_fc_hidden: vec![32],
            cacnn_dropout: 0.0,
            se_reduction: 3,
            expert_hidden: vec![32, 16],
        }
    }

    /// Width of the fused embedding fed to the head.
    pub fn fused_dim(&self) -> usize {
        6 * self.embedding_dim
    }
}

/// One batch of aligned six-modal windows. Shapes are (B, channels,
/// input_len) with the canonical channel counts 1/6/2/3/3/3.
#[derive(Debug, Clone)]
pub struct ModalBatch {
    pub ecg: Tensor,
    pub ppg: Tensor,
    pub lc: Tensor,
    pub temp: Tensor,
    pub acc: Tensor,
    pub gyro: Tensor,
}

impl ModalBatch {
    pub fn blocks(&self) -> [&Tensor; 6] {
        [&self.ecg, &self.ppg, &self.lc, &self.temp, &self.acc, &self.gyro]
    }

    pub fn batch_size(&self) -> usize {
        self.ecg.shape()[0]
    }
}

/// Forward products kept as live tape nodes so losses can be attached to
/// both the prediction and the per-modality embeddings.
pub struct ModelOutput {
    /// (B, 2): systolic, diastolic.
    pub pred: Var,
    /// Canonical order: ecg, ppg, lc, temp, acc, gyro. Each (B, embedding_dim).
    pub embeddings: [Var; 6],
    /// (B, 6 * embedding_dim) concatenation in canonical order.
    pub fused: Var,
}

/// Owns the parameters and the six encoder branches plus the head.
pub struct BpModel {
    pub params: ParamSet,
    pub config: ModelConfig,
    tcn: TcnEncoder,
    cacnn_ppg: CacnnEncoder,
    cacnn_lc: CacnnEncoder,
    cacnn_temp: CacnnEncoder,
    cacnn_acc: CacnnEncoder,
    cacnn_gyro: CacnnEncoder,
    head: MoeHead,
}

impl BpModel {
    pub fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
        let mut ps = ParamSet::new();
        let tcn = TcnEncoder::new(
            &mut ps,
            rng,
            "tcn",
            config.input_len,
            &config.tcn_channels,
            &config.tcn_fc_hidden,
            config.embedding_dim,
            config.tcn_dropout,
        )?;
        let cacnn = |ps: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, ch: usize| {
            CacnnEncoder::new(
                ps,
                rng,
                prefix,
                ch,
                config.input_len,
                config.cacnn_channels,
                config.se_reduction,
                &config.cacnn_fc_hidden,
                config.embedding_dim,
                config.cacnn_dropout,
            )
        };
        let cacnn_ppg = cacnn(&mut ps, rng, "cacnn_ppg", 6)?;
        let cacnn_lc = cacnn(&mut ps, rng, "cacnn_lc", 2)?;
        let cacnn_temp = cacnn(&mut ps, rng, "cacnn_temp", 3)?;
        let cacnn_acc = cacnn(&mut ps, rng, "cacnn_acc", 3)?;
        let cacnn_gyro = cacnn(&mut ps, rng, "cacnn_gyro", 3)?;
        let head = MoeHead::new(
            &mut ps,
            rng,
            config.fused_dim(),
            &config.expert_hidden,
            config.num_experts,
        )?;
        Ok(Self {
            params: ps,
            config: config.clone(),
            tcn,
            cacnn_ppg,
            cacnn_lc,
            cacnn_temp,
            cacnn_acc,
            cacnn_gyro,
            head,
        })
    }

    fn check_batch(&self, batch: &ModalBatch) -> Result<usize, TensorError> {
        let b = batch.batch_size();
        for (block, (&name, &ch)) in batch
            .blocks()
            .iter()
            .zip(MODALITY_NAMES.iter().zip(MODALITY_CHANNELS.iter()))
        {
            let want = [b, ch, self.config.input_len];
            if block.shape() != want {
                return Err(TensorError::ShapeMismatch {
                    op: "model_forward",
                    detail: format!("{name}: expected {:?}, got {:?}", want, block.shape()),
                });
            }
        }
        Ok(b)
    }

    pub fn forward(&self, ctx: &Ctx, batch: &ModalBatch) -> Result<ModelOutput, TensorError> {
        self.check_batch(batch)?;
        let tape = ctx.tape;
        let e = self.tcn.forward(ctx, tape.constant(batch.ecg.clone()))?;
        let p = self.cacnn_ppg.forward(ctx, tape.constant(batch.ppg.clone()))?;
        let l = self.cacnn_lc.forward(ctx, tape.constant(batch.lc.clone()))?;
        let t = self.cacnn_temp.forward(ctx, tape.constant(batch.temp.clone()))?;
        let a = self.cacnn_acc.forward(ctx, tape.constant(batch.acc.clone()))?;
        let g = self.cacnn_gyro.forward(ctx, tape.constant(batch.gyro.clone()))?;
        let fused = tape.concat_cols(&[e, p, l, t, a, g])?;
        let pred = self.head.forward(ctx, fused)?;
        Ok(ModelOutput { pred, embeddings: [e, p, l, t, a, g], fused })
    }
}
