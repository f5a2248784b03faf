//! Differentiable layers.
//!
//! Every layer keeps a stack of forward caches. Each `forward` pushes one
//! entry and each `backward` pops the most recent one, so a layer whose
//! parameters are shared across several applications (the atomic feature
//! learner runs five times per composite window) is differentiated by
//! calling `backward` in reverse application order. Parameter gradients
//! accumulate until [`Param::zero_grad`] is called.

mod conv;
mod dropout;
mod fc;
mod lstm;
mod pool;
mod softmax;

pub use conv::Conv1d;
pub use dropout::{dropout, Dropout};
pub use fc::{Activation, Fc};
pub use lstm::{lstm_step, Gate, Lstm};
pub use pool::MaxPool;
pub use softmax::{cross_entropy, softmax, softmax_ce_grad, CrossEntropy, Softmax};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Fc,
    Conv1d,
    MaxPool,
    Lstm,
    Softmax,
    Dropout,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::Fc,
        LayerKind::Conv1d,
        LayerKind::MaxPool,
        LayerKind::Lstm,
        LayerKind::Softmax,
        LayerKind::Dropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Fc => "FC",
            LayerKind::Conv1d => "Conv1D",
            LayerKind::MaxPool => "MaxPool",
            LayerKind::Lstm => "LSTM",
            LayerKind::Softmax => "Softmax",
            LayerKind::Dropout => "Dropout",
        }
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether L2 regularization applies (weights and kernels, not biases).
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
            decay,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Uniform Glorot initialization on `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::rand_uniform(rng, shape, -limit, limit).expect("glorot limit is positive")
}

pub trait Layer {
    fn kind(&self) -> LayerKind;

    /// Evaluates the layer and caches what `backward` needs.
    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor>;

    /// Pops the most recent cache, accumulates parameter gradients and
    /// returns the gradient with respect to that forward call's input.
    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor>;

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn clear_cache(&mut self);
}

pub(crate) fn relu_mask(out: &[f64], upstream: &[f64]) -> Vec<f64> {
    out.iter()
        .zip(upstream)
        .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
        .collect()
}
