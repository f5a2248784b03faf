use super::{expect_window, ArchConfig, Network, ATOMIC_LEN, CHANNELS, SEGMENTS, WINDOW_LEN};
use crate::data::{join_atomic, split_atomic};
use crate::error::{Error, Result};
use crate::layers::{softmax, Activation, Conv1d, Dropout, Fc, Layer, Lstm, MaxPool, Mode, Param};
use crate::tensor::{Rng, Tensor};

/// Atomic feature learner: `conv1 -> conv2 -> maxpool -> dropout -> fc(ReLU)`
/// on one `[3 x 60]` atomic window.
#[derive(Clone)]
pub struct Afl {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub pool: MaxPool,
    pub drop: Dropout,
    pub fc: Fc,
}

impl Afl {
    pub fn new(arch: &ArchConfig, rng: &mut Rng) -> Result<Self> {
        let pooled = arch
            .pooled_len(ATOMIC_LEN)
            .ok_or_else(|| Error::Config("atomic window too short for the convolution stack".into()))?;
        Ok(Afl {
            conv1: Conv1d::new("afl.conv1", CHANNELS, arch.conv1_kernels, arch.conv_width, rng),
            conv2: Conv1d::new("afl.conv2", arch.conv1_kernels, arch.conv2_kernels, arch.conv_width, rng),
            pool: MaxPool::new(arch.pool_region),
            drop: Dropout::new(0.0)?,
            fc: Fc::new("afl.fc", arch.conv2_kernels * pooled, arch.feature_dim, Activation::Relu, rng),
        })
    }

    fn check(x: &Tensor) -> Result<()> {
        if x.shape() != [CHANNELS, ATOMIC_LEN] {
            return Err(Error::Dimension(format!(
                "atomic feature learner: expected input {CHANNELS}x{ATOMIC_LEN}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Feature vector for one atomic window, without caching.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Self::check(x)?;
        let h = self.pool.apply(&self.conv2.apply(&self.conv1.apply(x)?)?)?;
        self.fc.apply(&h)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        Self::check(x)?;
        let h = self.conv1.forward(x, mode, rng)?;
        let h = self.conv2.forward(&h, mode, rng)?;
        let h = self.pool.forward(&h, mode, rng)?;
        let h = self.drop.forward(&h, mode, rng)?;
        self.fc.forward(&h, mode, rng)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let g = self.fc.backward(upstream)?;
        let g = self.drop.backward(&g)?;
        let g = self.pool.backward(&g)?;
        let g = self.conv2.backward(&g)?;
        self.conv1.backward(&g)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.conv1.params();
        v.extend(self.conv2.params());
        v.extend(self.fc.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv1.params_mut();
        v.extend(self.conv2.params_mut());
        v.extend(self.fc.params_mut());
        v
    }

    pub fn clear_cache(&mut self) {
        self.conv1.clear_cache();
        self.conv2.clear_cache();
        self.pool.clear_cache();
        self.drop.clear_cache();
        self.fc.clear_cache();
    }
}

/// Class probabilities together with every LSTM state.
#[derive(Debug, Clone)]
pub struct CompositeOutput {
    pub probs: Tensor,
    /// `[5 x h]`, row `t` holds `s_{t+1}`.
    pub states: Tensor,
}

impl CompositeOutput {
    /// State after the `step`-th atomic window, 1-based.
    pub fn state(&self, step: usize) -> Result<Tensor> {
        let (steps, h) = (self.states.shape()[0], self.states.shape()[1]);
        if step == 0 || step > steps {
            return Err(Error::Argument(format!("state index must be in 1..={steps}, got {step}")));
        }
        Ok(Tensor::from_vec(self.states.data()[(step - 1) * h..step * h].to_vec()))
    }
}

/// The full model. The window is cut into five atomic windows, each is
/// encoded by the same [`Afl`], the LSTM consumes the five features in
/// order, and the last state `s_5` is classified through FC1 and FC2.
#[derive(Clone)]
pub struct CompositeModel {
    arch: ArchConfig,
    pub afl: Afl,
    pub lstm_drop: Dropout,
    pub lstm: Lstm,
    pub fc1_drop: Dropout,
    pub fc1: Fc,
    pub fc2_drop: Dropout,
    pub fc2: Fc,
}

impl CompositeModel {
    pub fn new(arch: &ArchConfig, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        Ok(CompositeModel {
            arch: arch.clone(),
            afl: Afl::new(arch, rng)?,
            lstm_drop: Dropout::new(0.0)?,
            lstm: Lstm::new("lstm", arch.feature_dim, arch.lstm_hidden, arch.forget_bias, rng),
            fc1_drop: Dropout::new(0.0)?,
            fc1: Fc::new("fc1", arch.lstm_hidden, arch.fc1_dim, Activation::Relu, rng),
            fc2_drop: Dropout::new(0.0)?,
            fc2: Fc::new("fc2", arch.fc1_dim, arch.classes, Activation::Identity, rng),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        expect_window(x, "composite model")?;
        let mut rows = Vec::with_capacity(SEGMENTS * self.arch.feature_dim);
        for piece in split_atomic(x)? {
            rows.extend(self.afl.apply(&piece)?.into_data());
        }
        Tensor::new(vec![SEGMENTS, self.arch.feature_dim], rows)
    }

    fn last_row(states: &Tensor) -> Tensor {
        let h = states.shape()[1];
        Tensor::from_vec(states.data()[(SEGMENTS - 1) * h..].to_vec())
    }

    /// Probabilities and all internal states `s_1..s_5`, without caching.
    pub fn run(&self, x: &Tensor) -> Result<CompositeOutput> {
        let states = self.lstm.apply(&self.features(x)?)?;
        let z = self.fc2.apply(&self.fc1.apply(&Self::last_row(&states))?)?;
        Ok(CompositeOutput {
            probs: softmax(&z)?,
            states,
        })
    }
}

impl Network for CompositeModel {
    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        expect_window(x, "composite model")?;
        let d = self.arch.feature_dim;
        let mut seq = Vec::with_capacity(SEGMENTS * d);
        for piece in split_atomic(x)? {
            let f = self.afl.forward(&piece, mode, rng)?;
            seq.extend(self.lstm_drop.forward(&f, mode, rng)?.into_data());
        }
        let states = self.lstm.forward(&Tensor::new(vec![SEGMENTS, d], seq)?, mode, rng)?;
        let h = self.fc1_drop.forward(&Self::last_row(&states), mode, rng)?;
        let h = self.fc1.forward(&h, mode, rng)?;
        let h = self.fc2_drop.forward(&h, mode, rng)?;
        self.fc2.forward(&h, mode, rng)
    }

    fn backward(&mut self, dlogits: &Tensor) -> Result<Tensor> {
        let g = self.fc2.backward(dlogits)?;
        let g = self.fc2_drop.backward(&g)?;
        let g = self.fc1.backward(&g)?;
        let ds5 = self.fc1_drop.backward(&g)?;
        let hid = self.arch.lstm_hidden;
        let mut dstates = vec![0.0; SEGMENTS * hid];
        dstates[(SEGMENTS - 1) * hid..].copy_from_slice(ds5.data());
        let dseq = self.lstm.backward(&Tensor::new(vec![SEGMENTS, hid], dstates)?)?;
        let d = self.arch.feature_dim;
        let mut pieces = vec![Tensor::zeros(&[CHANNELS, ATOMIC_LEN]); SEGMENTS];
        for k in (0..SEGMENTS).rev() {
            let df = Tensor::from_vec(dseq.data()[k * d..(k + 1) * d].to_vec());
            let df = self.lstm_drop.backward(&df)?;
            pieces[k] = self.afl.backward(&df)?;
        }
        let dx = join_atomic(&pieces)?;
        debug_assert_eq!(dx.shape(), [CHANNELS, WINDOW_LEN]);
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.afl.params();
        v.extend(self.lstm.params());
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.afl.params_mut();
        v.extend(self.lstm.params_mut());
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }

    fn clear_cache(&mut self) {
        self.afl.clear_cache();
        self.lstm_drop.clear_cache();
        self.lstm.clear_cache();
        self.fc1_drop.clear_cache();
        self.fc1.clear_cache();
        self.fc2_drop.clear_cache();
        self.fc2.clear_cache();
    }

    fn set_dropout(&mut self, rate: f64) -> Result<()> {
        self.afl.drop.set_rate(rate)?;
        self.lstm_drop.set_rate(rate)?;
        self.fc1_drop.set_rate(rate)?;
        self.fc2_drop.set_rate(rate)
    }

    fn num_classes(&self) -> usize {
        self.arch.classes
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let states = self.lstm.apply(&self.features(x)?)?;
        self.fc2.apply(&self.fc1.apply(&Self::last_row(&states))?)
    }
}
