//! Dense mixture-of-experts regression head: a softmax gate over E expert
//! MLPs, output = sum_i g_i(f) * E_i(f). All experts are evaluated (no
//! top-k routing).

use super::layers::{BatchNorm1d, Linear};
use super::{Ctx, NnError, ParamSet};
use crate::tensor::{TensorError, Var};
use rand_chacha::ChaCha8Rng;

struct Expert {
    blocks: Vec<(Linear, BatchNorm1d)>,
    out: Linear,
}

pub struct MoeHead {
    pub gate: Linear,
    experts: Vec<Expert>,
    pub num_experts: usize,
    pub in_features: usize,
    pub out_features: usize,
}

impl MoeHead {
    /// `hidden` gives the expert MLP widths between the fused input and the
    /// 2-d output; each hidden block is linear + relu + batchnorm.
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        in_features: usize,
        hidden: &[usize],
        num_experts: usize,
    ) -> Result<Self, NnError> {
        if num_experts == 0 {
            return Err(NnError::InvalidConfig(
                "mixture needs at least one expert".into(),
            ));
        }
        let out_features = 2;
        let gate = Linear::new(ps, rng, "gate", in_features, num_experts)?;
        let mut experts = Vec::with_capacity(num_experts);
        for i in 0..num_experts {
            let mut blocks = Vec::new();
            let mut width = in_features;
            for (j, &h) in hidden.iter().enumerate() {
                let fc = Linear::new(
                    ps,
                    rng,
                    &format!("expert_{i}.block{}.fc", j + 1),
                    width,
                    h,
                )?;
                let bn = BatchNorm1d::new(ps, &format!("expert_{i}.block{}.bn", j + 1), h)?;
                blocks.push((fc, bn));
                width = h;
            }
            let out = Linear::new(ps, rng, &format!("expert_{i}.out"), width, out_features)?;
            experts.push(Expert { blocks, out });
        }
        Ok(Self { gate, experts, num_experts, in_features, out_features })
    }

    /// Softmax gate weights, shape (B, E); rows sum to one.
    pub fn gates(&self, ctx: &Ctx, fused: Var) -> Result<Var, TensorError> {
        let logits = self.gate.forward(ctx, fused)?;
        ctx.tape.softmax_rows(logits)
    }

    /// One expert MLP evaluated on the fused feature, shape (B, 2).
    pub fn expert_forward(&self, ctx: &Ctx, index: usize, fused: Var) -> Result<Var, TensorError> {
        let expert = &self.experts[index];
        let mut h = fused;
        for (fc, bn) in &expert.blocks {
            h = fc.forward(ctx, h)?;
            h = ctx.tape.relu(h)?;
            h = bn.forward(ctx, h)?;
        }
        expert.out.forward(ctx, h)
    }

    /// Gated mixture over all experts.
    pub fn forward(&self, ctx: &Ctx, fused: Var) -> Result<Var, TensorError> {
        let gates = self.gates(ctx, fused)?;
        let mut acc: Option<Var> = None;
        for i in 0..self.num_experts {
            let out_i = self.expert_forward(ctx, i, fused)?;
            let g_i = ctx.tape.select_col(gates, i)?;
            let scaled = ctx.tape.scale_rows(out_i, g_i)?;
            acc = Some(match acc {
                Some(a) => ctx.tape.add(a, scaled)?,
                None => scaled,
            });
        }
        Ok(acc.expect("at least one expert"))
    }
}
