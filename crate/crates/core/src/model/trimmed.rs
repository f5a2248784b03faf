use super::{expect_window, ArchConfig, ModelKind, Network, CHANNELS, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::layers::{Activation, Conv1d, Dropout, Fc, Layer, MaxPool, Mode, Param};
use crate::tensor::{Rng, Tensor};

/// Ablation without recurrent composition: the convolution stack runs over
/// the whole 15 s window and its flattened output feeds FC1 and FC2.
#[derive(Clone)]
pub struct TrimmedModel {
    arch: ArchConfig,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub pool: MaxPool,
    pub fc1_drop: Dropout,
    pub fc1: Fc,
    pub fc2_drop: Dropout,
    pub fc2: Fc,
}

impl TrimmedModel {
    pub fn new(arch: &ArchConfig, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let pooled = arch
            .pooled_len(WINDOW_LEN)
            .ok_or_else(|| Error::Config("window too short for the convolution stack".into()))?;
        Ok(TrimmedModel {
            arch: arch.clone(),
            conv1: Conv1d::new("conv1", CHANNELS, arch.conv1_kernels, arch.conv_width, rng),
            conv2: Conv1d::new("conv2", arch.conv1_kernels, arch.conv2_kernels, arch.conv_width, rng),
            pool: MaxPool::new(arch.pool_region),
            fc1_drop: Dropout::new(0.0)?,
            fc1: Fc::new("fc1", arch.conv2_kernels * pooled, arch.fc1_dim, Activation::Relu, rng),
            fc2_drop: Dropout::new(0.0)?,
            fc2: Fc::new("fc2", arch.fc1_dim, arch.classes, Activation::Identity, rng),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }
}

impl Network for TrimmedModel {
    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        expect_window(x, "trimmed model")?;
        let h = self.conv1.forward(x, mode, rng)?;
        let h = self.conv2.forward(&h, mode, rng)?;
        let h = self.pool.forward(&h, mode, rng)?;
        let h = self.fc1_drop.forward(&h, mode, rng)?;
        let h = self.fc1.forward(&h, mode, rng)?;
        let h = self.fc2_drop.forward(&h, mode, rng)?;
        self.fc2.forward(&h, mode, rng)
    }

    fn backward(&mut self, dlogits: &Tensor) -> Result<Tensor> {
        let g = self.fc2.backward(dlogits)?;
        let g = self.fc2_drop.backward(&g)?;
        let g = self.fc1.backward(&g)?;
        let g = self.fc1_drop.backward(&g)?;
        let g = self.pool.backward(&g)?;
        let g = self.conv2.backward(&g)?;
        self.conv1.backward(&g)
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.conv1.params();
        v.extend(self.conv2.params());
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv1.params_mut();
        v.extend(self.conv2.params_mut());
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }

    fn clear_cache(&mut self) {
        self.conv1.clear_cache();
        self.conv2.clear_cache();
        self.pool.clear_cache();
        self.fc1_drop.clear_cache();
        self.fc1.clear_cache();
        self.fc2_drop.clear_cache();
        self.fc2.clear_cache();
    }

    fn set_dropout(&mut self, rate: f64) -> Result<()> {
        self.fc1_drop.set_rate(rate)?;
        self.fc2_drop.set_rate(rate)
    }

    fn num_classes(&self) -> usize {
        self.arch.classes
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        expect_window(x, "trimmed model")?;
        let h = self.pool.apply(&self.conv2.apply(&self.conv1.apply(x)?)?)?;
        self.fc2.apply(&self.fc1.apply(&h)?)
    }
}

/// Single identity-activation FC on the flattened window, followed by softmax.
#[derive(Clone)]
pub struct LogisticRegression {
    pub(super) arch: ArchConfig,
    pub fc: Fc,
}

impl LogisticRegression {
    pub fn new(input_dim: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        if input_dim == 0 || classes == 0 {
            return Err(Error::Argument(format!(
                "logistic regression needs positive sizes, got input {input_dim}, classes {classes}"
            )));
        }
        Ok(LogisticRegression {
            arch: ArchConfig {
                kind: ModelKind::Logreg,
                classes,
                ..ArchConfig::default()
            },
            fc: Fc::new("fc", input_dim, classes, Activation::Identity, rng),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }
}

impl Network for LogisticRegression {
    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        self.fc.forward(x, mode, rng)
    }

    fn backward(&mut self, dlogits: &Tensor) -> Result<Tensor> {
        self.fc.backward(dlogits)
    }

    fn params(&self) -> Vec<&Param> {
        self.fc.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.fc.params_mut()
    }

    fn clear_cache(&mut self) {
        self.fc.clear_cache();
    }

    fn set_dropout(&mut self, _rate: f64) -> Result<()> {
        Ok(())
    }

    fn num_classes(&self) -> usize {
        self.arch.classes
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.fc.apply(x)
    }
}
