//! Model building blocks: a named parameter arena, layer types, the two
//! encoder families, and the mixture-of-experts regression head.

mod checkpoint;
mod encoders;
mod layers;
mod model;
mod moe;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use encoders::{CacnnEncoder, TcnEncoder};
pub use layers::{BatchNorm1d, Conv1dLayer, Dropout, Linear, SeBlock};
pub use model::{
    BpModel, ModalBatch, ModelConfig, ModelOutput, MODALITY_CHANNELS, MODALITY_NAMES,
};
pub use moe::MoeHead;

use crate::tensor::{Mode, Tape, Tensor, TensorError, Var};
use rand::Rng;
use std::cell::RefCell;
use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
    #[error("unknown parameter name {0}")]
    UnknownName(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Handle to a trainable tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Handle to a non-trainable state tensor (e.g. batchnorm running stats).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferId(usize);

#[derive(Debug)]
struct Parameter {
    name: String,
    value: Tensor,
}

/// Arena of named parameters and buffers owned by one model.
#[derive(Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    buffers: Vec<(String, RefCell<Tensor>)>,
    param_index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, NnError> {
        let name = name.into();
        if self.param_index.contains_key(&name) {
            return Err(NnError::DuplicateName(name));
        }
        let id = self.params.len();
        self.param_index.insert(name.clone(), id);
        self.params.push(Parameter { name, value });
        Ok(ParamId(id))
    }

    pub fn add_buffer(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
    ) -> Result<BufferId, NnError> {
        let name = name.into();
        if self.buffer_index.contains_key(&name) {
            return Err(NnError::DuplicateName(name));
        }
        let id = self.buffers.len();
        self.buffer_index.insert(name.clone(), id);
        self.buffers.push((name, RefCell::new(value)));
        Ok(BufferId(id))
    }

    pub fn param_value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set_param(&mut self, id: ParamId, value: Tensor) -> Result<(), NnError> {
        let current = &self.params[id.0];
        if current.value.shape() != value.shape() {
            return Err(NnError::Tensor(TensorError::ShapeMismatch {
                op: "set_param",
                detail: format!(
                    "{}: {:?} vs {:?}",
                    current.name,
                    current.value.shape(),
                    value.shape()
                ),
            }));
        }
        self.params[id.0].value = value;
        Ok(())
    }

    pub fn buffer(&self, id: BufferId) -> &RefCell<Tensor> {
        &self.buffers[id.0].1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.param_index.get(name).copied().map(ParamId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffer_index.get(name).copied().map(BufferId)
    }

    /// Parameters in declaration order.
    pub fn iter_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    pub fn iter_buffers(&self) -> impl Iterator<Item = (&str, &RefCell<Tensor>)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Registers every parameter as a tape leaf; `trainable` controls
    /// whether gradients are recorded.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Binding {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), trainable))
                .collect(),
        }
    }
}

/// Maps [`ParamId`]s to the tape leaves of the current forward pass.
#[derive(Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Builds a binding from externally created leaves. The order must
    /// match the parameter declaration order of the owning [`ParamSet`];
    /// used by gradient-verification harnesses that perturb parameters.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Everything a layer needs to run one forward pass.
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    pub params: &'a ParamSet,
    pub binding: &'a Binding,
    pub mode: Mode,
    pub rng: &'a RefCell<ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn var(&self, id: ParamId) -> Var {
        self.binding.var(id)
    }
}

/// Fan-in uniform initialization: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("shape/data agree by construction")
}
