use super::{glorot, relu_mask, Activation, Layer, LayerKind, Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone)]
struct ConvCache {
    x: Tensor,
    out: Vec<f64>,
}

/// Valid 1-D cross-correlation, stride 1, no padding, followed by an
/// activation. Input `[C_in x L]`, output `[K x (L - width + 1)]`.
#[derive(Clone)]
pub struct Conv1d {
    /// `[K x C_in x width]`
    pub kernels: Param,
    /// `[K]`
    pub biases: Param,
    pub activation: Activation,
    cache: Vec<ConvCache>,
}

impl Conv1d {
    pub fn new(name: &str, in_channels: usize, kernels: usize, width: usize, rng: &mut Rng) -> Self {
        let w = glorot(
            rng,
            &[kernels, in_channels, width],
            in_channels * width,
            kernels * width,
        );
        Self::from_params(name, w, Tensor::zeros(&[kernels]), Activation::Relu)
            .expect("freshly initialized shapes agree")
    }

    pub fn from_params(name: &str, kernels: Tensor, biases: Tensor, activation: Activation) -> Result<Self> {
        let s = kernels.shape();
        if s.len() != 3 || s[2] == 0 || biases.shape() != [s[0]] {
            return Err(Error::Dimension(format!(
                "Conv1D {name}: kernels {:?} incompatible with biases {:?}",
                s,
                biases.shape()
            )));
        }
        Ok(Conv1d {
            kernels: Param::new(format!("{name}.kernels"), kernels, true),
            biases: Param::new(format!("{name}.biases"), biases, false),
            activation,
            cache: Vec::new(),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.value.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.kernels.value.shape()[2]
    }

    pub fn out_len(&self, len: usize) -> usize {
        len + 1 - self.width()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (c_in, width, k_out) = (self.in_channels(), self.width(), self.out_channels());
        if x.shape().len() != 2 || x.shape()[0] != c_in {
            return Err(Error::Dimension(format!(
                "Conv1D {}: expected input [{c_in}xL], got {:?}",
                self.kernels.name,
                x.shape()
            )));
        }
        let len = x.shape()[1];
        if len < width {
            return Err(Error::SignalTooShort { len, required: width });
        }
        let out_len = len - width + 1;
        let xd = x.data();
        let w = self.kernels.value.data();
        let mut out = vec![0.0; k_out * out_len];
        for k in 0..k_out {
            let row = &mut out[k * out_len..(k + 1) * out_len];
            row.fill(self.biases.value.data()[k]);
            for c in 0..c_in {
                let xrow = &xd[c * len..(c + 1) * len];
                for j in 0..width {
                    let wv = w[(k * c_in + c) * width + j];
                    for (o, &xv) in row.iter_mut().zip(&xrow[j..j + out_len]) {
                        *o += wv * xv;
                    }
                }
            }
            if self.activation == Activation::Relu {
                row.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Tensor::new(vec![k_out, out_len], out)
    }
}

impl Layer for Conv1d {
    fn kind(&self) -> LayerKind {
        LayerKind::Conv1d
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode, _rng: &mut Rng) -> Result<Tensor> {
        let out = self.apply(x)?;
        self.cache.push(ConvCache {
            x: x.clone(),
            out: out.data().to_vec(),
        });
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .pop()
            .ok_or_else(|| Error::State(format!("Conv1D {}: backward without forward", self.kernels.name)))?;
        let (c_in, width, k_out) = (self.in_channels(), self.width(), self.out_channels());
        let len = cache.x.shape()[1];
        let out_len = len - width + 1;
        upstream.expect_shape(&[k_out, out_len], "Conv1D upstream")?;
        let dpre = match self.activation {
            Activation::Relu => relu_mask(&cache.out, upstream.data()),
            Activation::Identity => upstream.data().to_vec(),
        };
        let xd = cache.x.data();
        let w = self.kernels.value.data();
        let dw = self.kernels.grad.data_mut();
        let db = self.biases.grad.data_mut();
        let mut dx = vec![0.0; c_in * len];
        for k in 0..k_out {
            let g = &dpre[k * out_len..(k + 1) * out_len];
            db[k] += g.iter().sum::<f64>();
            for c in 0..c_in {
                let xrow = &xd[c * len..(c + 1) * len];
                let dxrow = &mut dx[c * len..(c + 1) * len];
                for j in 0..width {
                    let idx = (k * c_in + c) * width + j;
                    dw[idx] += crate::tensor::dot(g, &xrow[j..j + out_len]);
                    let wv = w[idx];
                    for (d, &gv) in dxrow[j..j + out_len].iter_mut().zip(g) {
                        *d += wv * gv;
                    }
                }
            }
        }
        Tensor::new(vec![c_in, len], dx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.kernels, &self.biases]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.kernels, &mut self.biases]
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(kernel: Vec<f64>) -> Conv1d {
        let w = kernel.len();
        Conv1d::from_params(
            "t",
            Tensor::new(vec![1, 1, w], kernel).unwrap(),
            Tensor::zeros(&[1]),
            Activation::Relu,
        )
        .unwrap()
    }

    fn signal(v: Vec<f64>) -> Tensor {
        let n = v.len();
        Tensor::new(vec![1, n], v).unwrap()
    }

    #[test]
    fn forward_examples() {
        assert_eq!(conv(vec![1.0]).apply(&signal(vec![1.0, -2.0, 3.0])).unwrap().data(), &[1.0, 0.0, 3.0]);
        assert_eq!(conv(vec![1.0, 1.0]).apply(&signal(vec![1.0, 2.0, 3.0])).unwrap().data(), &[3.0, 5.0]);

        let zero = Conv1d::from_params("z", Tensor::zeros(&[4, 3, 5]), Tensor::zeros(&[4]), Activation::Relu).unwrap();
        let mut rng = Rng::new(3);
        let x = Tensor::rand_uniform(&mut rng, &[3, 20], -1.0, 1.0).unwrap();
        let y = zero.apply(&x).unwrap();
        assert_eq!(y.shape(), &[4, 16]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_signal() {
        let c = conv(vec![1.0, 1.0, 1.0]);
        assert!(matches!(
            c.apply(&signal(vec![1.0, 2.0])),
            Err(Error::SignalTooShort { len: 2, required: 3 })
        ));
    }

    #[test]
    fn translation_equivariance() {
        let mut rng = Rng::new(11);
        let c = Conv1d::new("c", 3, 4, 5, &mut rng);
        let base = Tensor::rand_uniform(&mut rng, &[3, 41], -1.0, 1.0).unwrap();
        // x holds samples 0..40, shifted holds samples 1..41 of the same stream.
        let cut = |offset: usize| {
            let mut d = Vec::new();
            for ch in 0..3 {
                d.extend_from_slice(&base.data()[ch * 41 + offset..ch * 41 + offset + 40]);
            }
            Tensor::new(vec![3, 40], d).unwrap()
        };
        let y = c.apply(&cut(0)).unwrap();
        let ys = c.apply(&cut(1)).unwrap();
        for k in 0..4 {
            for t in 0..35 {
                assert_eq!(ys.data()[k * 36 + t].to_bits(), y.data()[k * 36 + t + 1].to_bits());
            }
        }
    }
}
