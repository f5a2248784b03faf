//! Model graphs: the shared atomic feature learner, the full composite
//! model, the trimmed ablation and a logistic-regression baseline, plus
//! parameter accounting and checkpoints.

mod checkpoint;
mod composite;
mod trimmed;

pub use checkpoint::{load, load_bytes, save, save_bytes, Checkpoint, TrainingMetadata, CHECKPOINT_VERSION};
pub use composite::{Afl, CompositeModel, CompositeOutput};
pub use trimmed::{LogisticRegression, TrimmedModel};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{softmax, Mode, Param};
use crate::tensor::{Rng, Tensor};

/// Accelerometer axes.
pub const CHANNELS: usize = 3;
/// Samples in one atomic window (3 s at 20 Hz).
pub const ATOMIC_LEN: usize = 60;
/// Atomic windows per composite window.
pub const SEGMENTS: usize = 5;
/// Samples in one composite window (15 s at 20 Hz).
pub const WINDOW_LEN: usize = ATOMIC_LEN * SEGMENTS;

/// The interface the training loop and evaluation harness drive.
pub trait Network {
    /// Logits for one `[3 x 300]` window, caching for `backward`.
    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor>;

    /// Consumes the most recent forward cache and accumulates parameter
    /// gradients. Returns the gradient with respect to the input window.
    fn backward(&mut self, dlogits: &Tensor) -> Result<Tensor>;

    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
    fn clear_cache(&mut self);
    fn set_dropout(&mut self, rate: f64) -> Result<()>;
    fn num_classes(&self) -> usize;

    /// Eval-mode logits without touching any cache.
    fn logits(&self, x: &Tensor) -> Result<Tensor>;

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        softmax(&self.logits(x)?)
    }

    fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(self.infer(x)?.data()))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn count_parameters(m: &(impl Network + ?Sized)) -> usize {
    m.params().iter().map(|p| p.value.len()).sum()
}

/// Storage needed at 32 bits per parameter.
pub fn memory_bits(parameter_count: usize) -> u64 {
    32 * parameter_count as u64
}

pub fn memory_footprint_bits(m: &(impl Network + ?Sized)) -> u64 {
    memory_bits(count_parameters(m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Full,
    Trimmed,
    Logreg,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Full => "full",
            ModelKind::Trimmed => "trimmed",
            ModelKind::Logreg => "logreg",
        }
    }
}

/// Architecture hyperparameters. Defaults give the full-size model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub kind: ModelKind,
    pub conv_width: usize,
    pub conv1_kernels: usize,
    pub conv2_kernels: usize,
    pub pool_region: usize,
    /// Size of the atomic feature vector.
    pub feature_dim: usize,
    pub lstm_hidden: usize,
    pub fc1_dim: usize,
    pub classes: usize,
    pub forget_bias: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            kind: ModelKind::Full,
            conv_width: 5,
            conv1_kernels: 8,
            conv2_kernels: 32,
            pool_region: 4,
            feature_dim: 128,
            lstm_hidden: 128,
            fc1_dim: 128,
            classes: 8,
            forget_bias: 1.0,
        }
    }
}

impl ArchConfig {
    pub fn with_kind(mut self, kind: ModelKind) -> Self {
        self.kind = kind;
        self
    }

    /// Time steps left after both convolutions and pooling of a signal of
    /// `len` samples, or `None` if the signal is too short.
    pub fn pooled_len(&self, len: usize) -> Option<usize> {
        let shrink = 2 * (self.conv_width.checked_sub(1)?);
        let conv = len.checked_sub(shrink)?;
        let pooled = conv / self.pool_region.max(1);
        (pooled > 0).then_some(pooled)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("conv_width", self.conv_width),
            ("conv1_kernels", self.conv1_kernels),
            ("conv2_kernels", self.conv2_kernels),
            ("pool_region", self.pool_region),
            ("feature_dim", self.feature_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("fc1_dim", self.fc1_dim),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("architecture field `{name}` must be positive")));
        }
        if self.pooled_len(ATOMIC_LEN).is_none() {
            return Err(Error::Config(format!(
                "conv_width {} and pool_region {} leave nothing of a {ATOMIC_LEN}-sample atomic window",
                self.conv_width, self.pool_region
            )));
        }
        if !self.forget_bias.is_finite() {
            return Err(Error::Config("forget_bias must be finite".into()));
        }
        Ok(())
    }
}

/// One of the three concrete graphs.
#[derive(Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Model {
    Full(CompositeModel),
    Trimmed(TrimmedModel),
    Logreg(LogisticRegression),
}

impl Model {
    pub fn build(arch: &ArchConfig, rng: &mut Rng) -> Result<Model> {
        arch.validate()?;
        Ok(match arch.kind {
            ModelKind::Full => Model::Full(CompositeModel::new(arch, rng)?),
            ModelKind::Trimmed => Model::Trimmed(TrimmedModel::new(arch, rng)?),
            ModelKind::Logreg => {
                let mut m = LogisticRegression::new(CHANNELS * WINDOW_LEN, arch.classes, rng)?;
                m.arch = arch.clone();
                Model::Logreg(m)
            }
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        match self {
            Model::Full(m) => m.arch(),
            Model::Trimmed(m) => m.arch(),
            Model::Logreg(m) => m.arch(),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.arch().kind
    }

    fn inner(&self) -> &dyn Network {
        match self {
            Model::Full(m) => m,
            Model::Trimmed(m) => m,
            Model::Logreg(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Network {
        match self {
            Model::Full(m) => m,
            Model::Trimmed(m) => m,
            Model::Logreg(m) => m,
        }
    }

    pub fn descriptor(&self) -> ArchDescriptor {
        let params = self
            .params()
            .iter()
            .map(|p| ParamShape {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        ArchDescriptor {
            arch: self.arch().clone(),
            parameter_count: count_parameters(self),
            memory_footprint_bits: memory_footprint_bits(self),
            params,
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("arch", self.arch())
            .field("parameters", &count_parameters(self))
            .finish()
    }
}

impl Network for Model {
    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        self.inner_mut().forward(x, mode, rng)
    }

    fn backward(&mut self, dlogits: &Tensor) -> Result<Tensor> {
        self.inner_mut().backward(dlogits)
    }

    fn params(&self) -> Vec<&Param> {
        self.inner().params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.inner_mut().params_mut()
    }

    fn clear_cache(&mut self) {
        self.inner_mut().clear_cache()
    }

    fn set_dropout(&mut self, rate: f64) -> Result<()> {
        self.inner_mut().set_dropout(rate)
    }

    fn num_classes(&self) -> usize {
        self.inner().num_classes()
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.inner().logits(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Human-readable architecture summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub arch: ArchConfig,
    pub parameter_count: usize,
    pub memory_footprint_bits: u64,
    pub params: Vec<ParamShape>,
}

pub fn export_architecture(m: &Model, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&m.descriptor()).expect("descriptor serializes");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub(crate) fn expect_window(x: &Tensor, what: &str) -> Result<()> {
    if x.shape() != [CHANNELS, WINDOW_LEN] {
        return Err(Error::Dimension(format!(
            "{what}: expected input {CHANNELS}x{WINDOW_LEN}, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}
