use super::{Layer, LayerKind, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone)]
struct PoolCache {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// Non-overlapping max pooling along time. Input `[C x L]`, output
/// `[C x floor(L / region)]`; a trailing remainder shorter than the region
/// is dropped. The gradient is routed to the first maximum of each region.
#[derive(Clone)]
pub struct MaxPool {
    region: usize,
    cache: Vec<PoolCache>,
}

impl MaxPool {
    pub fn new(region: usize) -> Self {
        assert!(region > 0, "pool region must be positive");
        MaxPool {
            region,
            cache: Vec::new(),
        }
    }

    pub fn region(&self) -> usize {
        self.region
    }

    pub fn out_len(&self, len: usize) -> usize {
        len / self.region
    }

    fn pool(&self, x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        if x.shape().len() != 2 {
            return Err(Error::Dimension(format!("MaxPool: expected [CxL], got {:?}", x.shape())));
        }
        let (c, len) = (x.shape()[0], x.shape()[1]);
        if len < self.region {
            return Err(Error::SignalTooShort {
                len,
                required: self.region,
            });
        }
        let out_len = len / self.region;
        let mut out = Vec::with_capacity(c * out_len);
        let mut argmax = Vec::with_capacity(c * out_len);
        for ch in 0..c {
            let row = &x.data()[ch * len..(ch + 1) * len];
            for (w, win) in row.chunks_exact(self.region).enumerate() {
                let (mut best, mut best_i) = (win[0], 0);
                for (i, &v) in win.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                argmax.push(ch * len + w * self.region + best_i);
                out.push(best);
            }
        }
        Ok((Tensor::new(vec![c, out_len], out)?, argmax))
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.pool(x).map(|(t, _)| t)
    }
}

impl Layer for MaxPool {
    fn kind(&self) -> LayerKind {
        LayerKind::MaxPool
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode, _rng: &mut Rng) -> Result<Tensor> {
        let (out, argmax) = self.pool(x)?;
        self.cache.push(PoolCache {
            input_shape: x.shape().to_vec(),
            argmax,
        });
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .pop()
            .ok_or_else(|| Error::State("MaxPool: backward without forward".into()))?;
        if upstream.len() != cache.argmax.len() {
            return Err(Error::Dimension(format!(
                "MaxPool upstream has {} elements, expected {}",
                upstream.len(),
                cache.argmax.len()
            )));
        }
        let mut dx = Tensor::zeros(&cache.input_shape);
        let d = dx.data_mut();
        for (&i, &g) in cache.argmax.iter().zip(upstream.data()) {
            d[i] += g;
        }
        Ok(dx)
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}
