//! Adam with bias-corrected first and second moments.

use super::TrainError;
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Moments start at zero, one pair per parameter of `ps`, in
    /// declaration order.
    pub fn new(ps: &ParamSet, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = ps
            .iter_params()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self { lr, beta1, beta2, eps, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter. `grads` must be in declaration
    /// order; `None` entries are treated as zero gradients.
    pub fn step(
        &mut self,
        ps: &mut ParamSet,
        grads: &[Option<Tensor>],
    ) -> Result<(), TrainError> {
        if grads.len() != self.m.len() {
            return Err(TrainError::InvalidConfig(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = ps.param_ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = grads[i].as_ref();
            if let Some(g) = g {
                if g.shape() != ps.param_value(id).shape() {
                    return Err(TrainError::InvalidConfig(format!(
                        "gradient shape {:?} for parameter {} of shape {:?}",
                        g.shape(),
                        ps.param_name(id),
                        ps.param_value(id).shape()
                    )));
                }
            }
            let md = self.m[i].data_mut();
            for (k, mk) in md.iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
            }
            let vd = self.v[i].data_mut();
            for (k, vk) in vd.iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
            }
            let mut value = ps.param_value(id).clone();
            {
                let data = value.data_mut();
                let md = self.m[i].data();
                let vd = self.v[i].data();
                for k in 0..data.len() {
                    let m_hat = md[k] / c1;
                    let v_hat = vd[k] / c2;
                    data[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
            ps.set_param(id, value).map_err(TrainError::Nn)?;
        }
        Ok(())
    }
}
