use serde::{Deserialize, Serialize};

use super::{glorot, relu_mask, Layer, LayerKind, Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone)]
struct FcCache {
    input_shape: Vec<usize>,
    x: Vec<f64>,
    out: Vec<f64>,
}

/// Fully connected layer `act(W x + b)`. Inputs of any shape are flattened.
#[derive(Clone)]
pub struct Fc {
    pub weight: Param,
    pub bias: Param,
    pub activation: Activation,
    cache: Vec<FcCache>,
}

impl Fc {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, activation: Activation, rng: &mut Rng) -> Self {
        let w = glorot(rng, &[out_dim, in_dim], in_dim, out_dim);
        Self::from_params(name, w, Tensor::zeros(&[out_dim]), activation)
            .expect("freshly initialized shapes agree")
    }

    pub fn from_params(name: &str, w: Tensor, b: Tensor, activation: Activation) -> Result<Self> {
        if w.shape().len() != 2 || b.shape() != [w.shape()[0]] {
            return Err(Error::Dimension(format!(
                "FC {name}: weight {:?} incompatible with bias {:?}",
                w.shape(),
                b.shape()
            )));
        }
        Ok(Fc {
            weight: Param::new(format!("{name}.weight"), w, true),
            bias: Param::new(format!("{name}.bias"), b, false),
            activation,
            cache: Vec::new(),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    /// Pure evaluation; no cache.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.len() != self.in_dim() {
            return Err(Error::Dimension(format!(
                "FC {}: input has {} elements, expected {}",
                self.weight.name,
                x.len(),
                self.in_dim()
            )));
        }
        let mut z = self.weight.value.matvec(x.data())?;
        for (zi, bi) in z.iter_mut().zip(self.bias.value.data()) {
            *zi += bi;
            if self.activation == Activation::Relu && *zi < 0.0 {
                *zi = 0.0;
            }
        }
        Ok(Tensor::from_vec(z))
    }
}

impl Layer for Fc {
    fn kind(&self) -> LayerKind {
        LayerKind::Fc
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode, _rng: &mut Rng) -> Result<Tensor> {
        let out = self.apply(x)?;
        self.cache.push(FcCache {
            input_shape: x.shape().to_vec(),
            x: x.data().to_vec(),
            out: out.data().to_vec(),
        });
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .pop()
            .ok_or_else(|| Error::State(format!("FC {}: backward without forward", self.weight.name)))?;
        if upstream.len() != self.out_dim() {
            return Err(Error::Dimension(format!(
                "FC {}: upstream has {} elements, expected {}",
                self.weight.name,
                upstream.len(),
                self.out_dim()
            )));
        }
        let dpre = match self.activation {
            Activation::Relu => relu_mask(&cache.out, upstream.data()),
            Activation::Identity => upstream.data().to_vec(),
        };
        let n_in = self.in_dim();
        let w = self.weight.value.data();
        let dw = self.weight.grad.data_mut();
        let mut dx = vec![0.0; n_in];
        for (o, &g) in dpre.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let wrow = &w[o * n_in..(o + 1) * n_in];
            let dwrow = &mut dw[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                dwrow[i] += g * cache.x[i];
                dx[i] += g * wrow[i];
            }
        }
        for (db, g) in self.bias.grad.data_mut().iter_mut().zip(&dpre) {
            *db += g;
        }
        Tensor::new(cache.input_shape, dx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}
