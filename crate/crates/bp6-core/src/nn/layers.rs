//! Individual layers. Each holds parameter handles plus hyperparameters and
//! runs its forward pass against a [`Ctx`].

use super::{uniform_init, BufferId, Ctx, NnError, ParamId, ParamSet};
use crate::tensor::{Tensor, TensorError, Var};
use rand_chacha::ChaCha8Rng;

#[derive(Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self, NnError> {
        let weight = ps.add_param(
            format!("{prefix}.weight"),
            uniform_init(&[out_features, in_features], in_features, rng),
        )?;
        let bias = ps.add_param(format!("{prefix}.bias"), Tensor::zeros(&[out_features]))?;
        Ok(Self { weight, bias, in_features, out_features })
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var, TensorError> {
        ctx.tape.linear(x, ctx.var(self.weight), ctx.var(self.bias))
    }
}

#[derive(Debug)]
pub struct Conv1dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub left_pad: usize,
}

impl Conv1dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        left_pad: usize,
    ) -> Result<Self, NnError> {
        let fan_in = in_channels * kernel;
        let weight = ps.add_param(
            format!("{prefix}.weight"),
            uniform_init(&[out_channels, in_channels, kernel], fan_in, rng),
        )?;
        let bias = ps.add_param(format!("{prefix}.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            dilation,
            left_pad,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var, TensorError> {
        ctx.tape.conv1d(
            x,
            ctx.var(self.weight),
            ctx.var(self.bias),
            self.stride,
            self.dilation,
            self.left_pad,
        )
    }

    pub fn out_len(&self, in_len: usize) -> Option<usize> {
        crate::tensor::Tape::conv1d_out_len(
            in_len,
            self.kernel,
            self.stride,
            self.dilation,
            self.left_pad,
        )
        .filter(|&l| l > 0)
    }
}

#[derive(Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new(ps: &mut ParamSet, prefix: &str, channels: usize) -> Result<Self, NnError> {
        let gamma = ps.add_param(format!("{prefix}.gamma"), Tensor::filled(&[channels], 1.0))?;
        let beta = ps.add_param(format!("{prefix}.beta"), Tensor::zeros(&[channels]))?;
        let running_mean =
            ps.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]))?;
        let running_var =
            ps.add_buffer(format!("{prefix}.running_var"), Tensor::filled(&[channels], 1.0))?;
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var, TensorError> {
        ctx.tape.batchnorm(
            x,
            ctx.var(self.gamma),
            ctx.var(self.beta),
            ctx.params.buffer(self.running_mean),
            ctx.params.buffer(self.running_var),
            ctx.mode,
            self.momentum,
            self.eps,
        )
    }
}

#[derive(Debug)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        Self { p }
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var, TensorError> {
        let mut rng = ctx.rng.borrow_mut();
        ctx.tape.dropout(x, self.p, ctx.mode, &mut *rng)
    }
}

/// Squeeze-and-excitation channel attention: global average pool, a
/// two-layer bottleneck with sigmoid gates, then channel-wise rescaling.
#[derive(Debug)]
pub struct SeBlock {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
    pub hidden: usize,
}

impl SeBlock {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self, NnError> {
        let hidden = (channels / reduction.max(1)).max(1);
        let fc1 = Linear::new(ps, rng, &format!("{prefix}.fc1"), channels, hidden)?;
        let fc2 = Linear::new(ps, rng, &format!("{prefix}.fc2"), hidden, channels)?;
        Ok(Self { fc1, fc2, channels, hidden })
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Result<Var, TensorError> {
        let squeezed = ctx.tape.global_avg_pool(x)?;
        let h = self.fc1.forward(ctx, squeezed)?;
        let h = ctx.tape.relu(h)?;
        let h = self.fc2.forward(ctx, h)?;
        let gates = ctx.tape.sigmoid(h)?;
        ctx.tape.scale_channels(x, gates)
    }

    /// The gate vector alone, for diagnostics and tests.
    pub fn gates(&self, ctx: &Ctx, x: Var) -> Result<Var, TensorError> {
        let squeezed = ctx.tape.global_avg_pool(x)?;
        let h = self.fc1.forward(ctx, squeezed)?;
        let h = ctx.tape.relu(h)?;
        let h = self.fc2.forward(ctx, h)?;
        ctx.tape.sigmoid(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Mode, Tape};
    use rand::SeedableRng;
    use std::cell::RefCell;

    #[test]
    fn se_block_hidden_width_and_gate_range() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let se = SeBlock::new(&mut ps, &mut rng, "se", 27, 9).unwrap();
        assert_eq!(se.hidden, 3);

        let tape = Tape::new();
        let binding = ps.bind(&tape, false);
        let rng_cell = RefCell::new(ChaCha8Rng::seed_from_u64(0));
        let ctx = Ctx {
            tape: &tape,
            params: &ps,
            binding: &binding,
            mode: Mode::Eval,
            rng: &rng_cell,
        };
        let mut in_rng = ChaCha8Rng::seed_from_u64(2);
        let x = tape.constant(uniform_init(&[2, 27, 10], 1, &mut in_rng));
        let g = se.gates(&ctx, x).unwrap();
        let gv = tape.value(g);
        assert_eq!(gv.shape(), &[2, 27]);
        assert!(gv.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn se_block_scales_channels_uniformly_over_time() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let se = SeBlock::new(&mut ps, &mut rng, "se", 27, 9).unwrap();
        let tape = Tape::new();
        let binding = ps.bind(&tape, false);
        let rng_cell = RefCell::new(ChaCha8Rng::seed_from_u64(0));
        let ctx = Ctx {
            tape: &tape,
            params: &ps,
            binding: &binding,
            mode: Mode::Eval,
            rng: &rng_cell,
        };
        let mut in_rng = ChaCha8Rng::seed_from_u64(4);
        let xt = uniform_init(&[1, 27, 8], 1, &mut in_rng).map(|v| v + 3.0);
        let x = tape.constant(xt.clone());
        let y = se.forward(&ctx, x).unwrap();
        let yv = tape.value(y);
        // Output/input ratio must be constant along time per channel.
        for c in 0..27 {
            let base = c * 8;
            let r0 = yv.data()[base] / xt.data()[base];
            for t in 1..8 {
                let r = yv.data()[base + t] / xt.data()[base + t];
                assert!((r - r0).abs() < 1e-12);
            }
            assert!(r0 > 0.0 && r0 < 1.0);
        }
    }

    #[test]
    fn se_gates_saturate_to_identity_with_large_bias() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let se = SeBlock::new(&mut ps, &mut rng, "se", 9, 9).unwrap();
        // Force the excitation pre-activation far positive.
        ps.set_param(se.fc2.bias, Tensor::filled(&[9], 50.0)).unwrap();
        let tape = Tape::new();
        let binding = ps.bind(&tape, false);
        let rng_cell = RefCell::new(ChaCha8Rng::seed_from_u64(0));
        let ctx = Ctx {
            tape: &tape,
            params: &ps,
            binding: &binding,
            mode: Mode::Eval,
            rng: &rng_cell,
        };
        let mut in_rng = ChaCha8Rng::seed_from_u64(6);
        let xt = uniform_init(&[1, 9, 5], 1, &mut in_rng);
        let x = tape.constant(xt.clone());
        let y = se.forward(&ctx, x).unwrap();
        let yv = tape.value(y);
        for (a, b) in yv.data().iter().zip(xt.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
