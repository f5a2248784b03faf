use super::{Layer, LayerKind, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; evaluation is the
/// identity.
#[derive(Clone)]
pub struct Dropout {
    rate: f64,
    /// `None` marks an identity pass.
    cache: Vec<Option<Vec<f64>>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        Self::check_rate(rate)?;
        Ok(Dropout {
            rate,
            cache: Vec::new(),
        })
    }

    fn check_rate(rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        Ok(())
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn set_rate(&mut self, rate: f64) -> Result<()> {
        Self::check_rate(rate)?;
        self.rate = rate;
        Ok(())
    }
}

/// Functional form of the layer's forward pass.
pub fn dropout(x: &Tensor, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
    let mut layer = Dropout::new(rate)?;
    layer.forward(x, mode, rng)
}

impl Layer for Dropout {
    fn kind(&self) -> LayerKind {
        LayerKind::Dropout
    }

    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        if mode == Mode::Eval || self.rate == 0.0 {
            self.cache.push(None);
            return Ok(x.clone());
        }
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.bernoulli(keep) { scale } else { 0.0 })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.cache.push(Some(mask));
        Tensor::new(x.shape().to_vec(), out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        match self.cache.pop() {
            None => Err(Error::State("Dropout: backward without forward".into())),
            Some(None) => Ok(upstream.clone()),
            Some(Some(mask)) => {
                if mask.len() != upstream.len() {
                    return Err(Error::Dimension(format!(
                        "Dropout upstream has {} elements, mask has {}",
                        upstream.len(),
                        mask.len()
                    )));
                }
                Tensor::new(
                    upstream.shape().to_vec(),
                    upstream.data().iter().zip(&mask).map(|(g, m)| g * m).collect(),
                )
            }
        }
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}
