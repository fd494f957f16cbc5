//! The two encoder families that map a modality block to an embedding:
//! a causal dilated temporal convolution stack for the single-channel
//! cardiac signal, and a channel-attention CNN for the multi-channel
//! modalities. Widths are configurable; the defaults live in
//! [`super::ModelConfig`].

use super::layers::{BatchNorm1d, Conv1dLayer, Dropout, Linear, SeBlock};
use super::{Ctx, NnError, ParamSet};
use crate::tensor::{Tape, TensorError, Var};
use rand_chacha::ChaCha8Rng;

struct TcnLevel {
    conv: Conv1dLayer,
    bn: BatchNorm1d,
    dropout: Dropout,
}

/// Causal dilated convolution encoder: one conv level per entry of
/// `channels` (kernel 3, dilation doubling 1, 2, 4, ..., left pad
/// dilation*(k-1)), each followed by batchnorm, relu and dropout, then a
/// fully connected stack down to the embedding.
pub struct TcnEncoder {
    levels: Vec<TcnLevel>,
    fc: Vec<Linear>,
    fc_dropout: Dropout,
    pub input_len: usize,
    pub flatten_features: usize,
    pub embedding_dim: usize,
}

impl TcnEncoder {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input_len: usize,
        channels: &[usize],
        fc_hidden: &[usize],
        embedding_dim: usize,
        dropout_p: f64,
    ) -> Result<Self, NnError> {
        if channels.is_empty() {
            return Err(NnError::InvalidConfig("tcn needs at least one conv level".into()));
        }
        let kernel = 3;
        let mut levels = Vec::new();
        let mut len = input_len;
        let mut c_in = 1;
        for (i, &c_out) in channels.iter().enumerate() {
            let dilation = 1usize << i;
            let left_pad = dilation * (kernel - 1);
            let conv = Conv1dLayer::new(
                ps,
                rng,
                &format!("{prefix}.level{}.conv", i + 1),
                c_in,
                c_out,
                kernel,
                1,
                dilation,
                left_pad,
            )?;
            len = conv.out_len(len).ok_or_else(|| {
                NnError::Tensor(TensorError::ShapeMismatch {
                    op: "tcn_new",
                    detail: format!("input length {input_len} too short for level {}", i + 1),
                })
            })?;
            let bn = BatchNorm1d::new(ps, &format!("{prefix}.level{}.bn", i + 1), c_out)?;
            levels.push(TcnLevel { conv, bn, dropout: Dropout::new(dropout_p) });
            c_in = c_out;
        }
        let flatten_features = c_in * len;
        let mut widths = vec![flatten_features];
        widths.extend_from_slice(fc_hidden);
        widths.push(embedding_dim);
        let mut fc = Vec::new();
        for i in 0..widths.len() - 1 {
            fc.push(Linear::new(
                ps,
                rng,
                &format!("{prefix}.fc{}", i + 1),
                widths[i],
                widths[i + 1],
            )?);
        }
        Ok(Self {
            levels,
            fc,
            fc_dropout: Dropout::new(dropout_p),
            input_len,
            flatten_features,
            embedding_dim,
        })
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<(), TensorError> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[1] != 1 || shape[2] != self.input_len {
            return Err(TensorError::ShapeMismatch {
                op: "tcn_forward",
                detail: format!("expected (B, 1, {}), got {:?}", self.input_len, shape),
            });
        }
        Ok(())
    }

    /// The convolutional part only, returning the pre-flatten activation of
    /// shape (B, channels_last, input_len). Exposed so causality can be
    /// checked before the fully connected stack mixes time steps.
    pub fn conv_stack(&self, ctx: &Ctx, x: Var) -> Result<Var, TensorError> {
        self.check_input(ctx.tape, x)?;
        let mut h = x;
        for level in &self.levels {
            h = level.conv.forward(ctx, h)?;
            h = level.bn.forward(ctx, h)?;
            h = ctx.tape.relu(h)?;
            h = level.dropout.forward(ctx, h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var, TensorError> {
        let h = self.conv_stack(ctx, x)?;
        let mut h = ctx.tape.flatten(h)?;
        let last = self.fc.len() - 1;
        for (i, layer) in self.fc.iter().enumerate() {
            h = layer.forward(ctx, h)?;
            if i < last {
                h = ctx.tape.relu(h)?;
                h = self.fc_dropout.forward(ctx, h)?;
            }
        }
        Ok(h)
    }
}

struct CacnnLevel {
    conv: Conv1dLayer,
    bn: BatchNorm1d,
    se: SeBlock,
}

/// Channel-attention CNN encoder: three conv levels (kernels 18/9/7, no
/// padding), each followed by batchnorm, relu, maxpool(3,3) and a
/// squeeze-excitation block, then a fully connected stack down to the
/// embedding.
pub struct CacnnEncoder {
    levels: Vec<CacnnLevel>,
    fc: Vec<Linear>,
    fc_dropout: Dropout,
    pub in_channels: usize,
    pub input_len: usize,
    pub flatten_features: usize,
    pub embedding_dim: usize,
}

impl CacnnEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: usize,
        input_len: usize,
        conv_channels: usize,
        se_reduction: usize,
        fc_hidden: &[usize],
        embedding_dim: usize,
        dropout_p: f64,
    ) -> Result<Self, NnError> {
        let kernels = [18usize, 9, 7];
        let (pool_k, pool_s) = (3usize, 3usize);
        let mut levels = Vec::new();
        let mut len = input_len;
        let mut c_in = in_channels;
        for (i, &k) in kernels.iter().enumerate() {
            let conv = Conv1dLayer::new(
                ps,
                rng,
                &format!("{prefix}.level{}.conv", i + 1),
                c_in,
                conv_channels,
                k,
                1,
                1,
                0,
            )?;
            len = conv.out_len(len).ok_or_else(|| {
                NnError::Tensor(TensorError::ShapeMismatch {
                    op: "cacnn_new",
                    detail: format!("input length {input_len} too short for level {}", i + 1),
                })
            })?;
            len = Tape::maxpool1d_out_len(len, pool_k, pool_s)
                .filter(|&l| l > 0)
                .ok_or_else(|| {
                    NnError::Tensor(TensorError::ShapeMismatch {
                        op: "cacnn_new",
                        detail: format!("length collapsed at pool {}", i + 1),
                    })
                })?;
            let bn = BatchNorm1d::new(ps, &format!("{prefix}.level{}.bn", i + 1), conv_channels)?;
            let se = SeBlock::new(
                ps,
                rng,
                &format!("{prefix}.level{}.se", i + 1),
                conv_channels,
                se_reduction,
            )?;
            levels.push(CacnnLevel { conv, bn, se });
            c_in = conv_channels;
        }
        let flatten_features = conv_channels * len;
        let mut widths = vec![flatten_features];
        widths.extend_from_slice(fc_hidden);
        widths.push(embedding_dim);
        let mut fc = Vec::new();
        for i in 0..widths.len() - 1 {
            fc.push(Linear::new(
                ps,
                rng,
                &format!("{prefix}.fc{}", i + 1),
                widths[i],
                widths[i + 1],
            )?);
        }
        Ok(Self {
            levels,
            fc,
            fc_dropout: Dropout::new(dropout_p),
            in_channels,
            input_len,
            flatten_features,
            embedding_dim,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var, TensorError> {
        let shape = ctx.tape.shape(x);
        if shape.len() != 3 || shape[1] != self.in_channels || shape[2] != self.input_len {
            return Err(TensorError::ShapeMismatch {
                op: "cacnn_forward",
                detail: format!(
                    "expected (B, {}, {}), got {:?}",
                    self.in_channels, self.input_len, shape
                ),
            });
        }
        let mut h = x;
        for level in &self.levels {
            h = level.conv.forward(ctx, h)?;
            h = level.bn.forward(ctx, h)?;
            h = ctx.tape.relu(h)?;
            h = ctx.tape.maxpool1d(h, 3, 3)?;
            h = level.se.forward(ctx, h)?;
        }
        let mut h = ctx.tape.flatten(h)?;
        let last = self.fc.len() - 1;
        for (i, layer) in self.fc.iter().enumerate() {
            h = layer.forward(ctx, h)?;
            if i < last {
                h = ctx.tape.relu(h)?;
                h = self.fc_dropout.forward(ctx, h)?;
            }
        }
        Ok(h)
    }

    /// Pins every SE gate to 1 by saturating the excitation bias; used by
    /// tests to confirm the attention path affects the output.
    pub fn pin_se_gates_open(&self, ps: &mut ParamSet) -> Result<(), NnError> {
        for level in &self.levels {
            let bias = level.se.fc2.bias;
            let channels = ps.param_value(bias).len();
            ps.set_param(bias, crate::tensor::Tensor::filled(&[channels], 60.0))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Binding;
    use crate::tensor::{finite_diff_check_sampled_with_step, Mode, Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use std::cell::RefCell;

    fn full_width_tcn(ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> TcnEncoder {
        TcnEncoder::new(ps, rng, "tcn", 1000, &[128, 64, 9], &[4096, 2048, 512], 128, 0.2)
            .unwrap()
    }

    fn full_width_cacnn(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: usize,
    ) -> CacnnEncoder {
        CacnnEncoder::new(
            ps,
            rng,
            prefix,
            in_channels,
            1000,
            27,
            9,
            &[512, 512, 256],
            128,
            0.3,
        )
        .unwrap()
    }

    fn rand_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    fn eval_ctx<'a>(
        tape: &'a Tape,
        ps: &'a ParamSet,
        binding: &'a Binding,
        rng: &'a RefCell<ChaCha8Rng>,
    ) -> Ctx<'a> {
        Ctx { tape, params: ps, binding, mode: Mode::Eval, rng }
    }

    #[test]
    fn tcn_flatten_width_emerges_from_length_arithmetic() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tcn = full_width_tcn(&mut ps, &mut rng);
        assert_eq!(tcn.flatten_features, 9000);
    }

    #[test]
    fn cacnn_flatten_width_emerges_from_length_arithmetic() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = full_width_cacnn(&mut ps, &mut rng, "cacnn_ppg", 6);
        assert_eq!(enc.flatten_features, 891);
    }

    #[test]
    fn tcn_forward_yields_embedding_and_is_deterministic_in_eval() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tcn = full_width_tcn(&mut ps, &mut rng);
        let x = rand_input(&[2, 1, 1000], 10);

        let run = || {
            let tape = Tape::new();
            let binding = ps.bind(&tape, false);
            let rng_cell = RefCell::new(ChaCha8Rng::seed_from_u64(0));
            let ctx = eval_ctx(&tape, &ps, &binding, &rng_cell);
            let xv = tape.constant(x.clone());
            let y = tcn.forward(&ctx, xv).unwrap();
            tape.value(y)
        };
        let y1 = run();
        let y2 = run();
        assert_eq!(y1.shape(), &[2, 128]);
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn tcn_conv_stack_is_causal_before_the_fc_stack() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tcn = full_width_tcn(&mut ps, &mut rng);
        let t0 = 600;
        let x_full = rand_input(&[1, 1, 1000], 11);
        let mut zeroed = x_full.clone();
        for t in t0 + 1..1000 {
            zeroed.data_mut()[t] = 0.0;
        }

        let run = |x: &Tensor| {
            let tape = Tape::new();
            let binding = ps.bind(&tape, false);
            let rng_cell = RefCell::new(ChaCha8Rng::seed_from_u64(0));
            let ctx = eval_ctx(&tape, &ps, &binding, &rng_cell);
            let xv = tape.constant(x.clone());
            let y = tcn.conv_stack(&ctx, xv).unwrap();
            tape.value(y)
        };
        let a = run(&x_full);
        let b = run(&zeroed);
        assert_eq!(a.shape(), &[1, 9, 1000]);
        for c in 0..9 {
            for t in 0..=t0 {
                let (va, vb) = (a.data()[c * 1000 + t], b.data()[c * 1000 + t]);
                assert!(va == vb, "channel {c} time {t}: {va} vs {vb}");
            }
        }
    }

    #[test]
    fn cacnn_rejects_wrong_channel_count() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = full_width_cacnn(&mut ps, &mut rng, "cacnn_lc", 2);
        let tape = Tape::new();
        let binding = ps.bind(&tape, false);
        let rng_cell = RefCell::new(ChaCha8Rng::seed_from_u64(0));
        let ctx = eval_ctx(&tape, &ps, &binding, &rng_cell);
        let x = tape.constant(Tensor::zeros(&[1, 3, 1000]));
        assert!(matches!(
            enc.forward(&ctx, x),
            Err(TensorError::ShapeMismatch { op: "cacnn_forward", .. })
        ));
    }

    #[test]
    fn cacnn_forward_changes_when_se_gates_are_pinned_open() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = full_width_cacnn(&mut ps, &mut rng, "cacnn_temp", 3);
        let x = rand_input(&[1, 3, 1000], 12);

        let run = |ps: &ParamSet| {
            let tape = Tape::new();
            let binding = ps.bind(&tape, false);
            let rng_cell = RefCell::new(ChaCha8Rng::seed_from_u64(0));
            let ctx = eval_ctx(&tape, ps, &binding, &rng_cell);
            let xv = tape.constant(x.clone());
            let y = enc.forward(&ctx, xv).unwrap();
            tape.value(y)
        };
        let before = run(&ps);
        enc.pin_se_gates_open(&mut ps).unwrap();
        let after = run(&ps);
        assert_eq!(before.shape(), &[1, 128]);
        let max_delta = before
            .data()
            .iter()
            .zip(after.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_delta > 1e-6, "attention path appears disconnected");
    }

    #[test]
    fn tcn_end_to_end_gradients_match_finite_differences() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tcn = full_width_tcn(&mut ps, &mut rng);
        let x = rand_input(&[1, 1, 1000], 13);
        let values: Vec<Tensor> = ps.iter_params().map(|(_, t)| t.clone()).collect();

        // A 1e-7 step: the probe must stay below the scale at which early
        // layer perturbations push downstream relu inputs across zero.
        let err = finite_diff_check_sampled_with_step(
            &values,
            |tape, vars| {
                // Bind the (possibly perturbed) values in declaration order;
                // `ps` itself only supplies the batchnorm buffers, which eval
                // mode reads without mutating.
                let binding = Binding::from_vars(vars.to_vec());
                let rng_cell = RefCell::new(ChaCha8Rng::seed_from_u64(0));
                let ctx = Ctx {
                    tape,
                    params: &ps,
                    binding: &binding,
                    mode: Mode::Eval,
                    rng: &rng_cell,
                };
                let xv = tape.constant(x.clone());
                let y = tcn.forward(&ctx, xv)?;
                let flat = tape.reshape(y, &[128])?;
                let w = tape.constant(Tensor::filled(&[128], 0.1));
                tape.dot(flat, w)
            },
            24,
            99,
            1e-7,
        )
        .unwrap();
        assert!(err < 1e-4, "sampled gradient error {err:.3e}");
    }

    #[test]
    fn cacnn_end_to_end_gradients_match_finite_differences() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let enc = full_width_cacnn(&mut ps, &mut rng, "cacnn_acc", 3);
        let x = rand_input(&[1, 3, 1000], 14);
        let values: Vec<Tensor> = ps.iter_params().map(|(_, t)| t.clone()).collect();

        let err = finite_diff_check_sampled_with_step(
            &values,
            |tape, vars| {
                let binding = Binding::from_vars(vars.to_vec());
                let rng_cell = RefCell::new(ChaCha8Rng::seed_from_u64(0));
                let ctx = Ctx {
                    tape,
                    params: &ps,
                    binding: &binding,
                    mode: Mode::Eval,
                    rng: &rng_cell,
                };
                let xv = tape.constant(x.clone());
                let y = enc.forward(&ctx, xv)?;
                let flat = tape.reshape(y, &[128])?;
                let w = tape.constant(Tensor::filled(&[128], 0.1));
                tape.dot(flat, w)
            },
            24,
            100,
            1e-7,
        )
        .unwrap();
        assert!(err < 1e-4, "sampled gradient error {err:.3e}");
    }
}

