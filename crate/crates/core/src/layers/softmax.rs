use super::{Layer, LayerKind, Mode};
use crate::error::{Error, Result};
use crate::tensor::{dot, Rng, Tensor};

/// Smallest probability fed to the logarithm in [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-300;

/// `P(i) = exp(z_i) / sum_j exp(z_j)`, evaluated after subtracting `max(z)`.
pub fn softmax(z: &Tensor) -> Result<Tensor> {
    if z.is_empty() || !z.is_finite() {
        return Err(Error::Numeric(format!("softmax needs finite non-empty logits, got {z:?}")));
    }
    let max = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.data().iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Tensor::new(z.shape().to_vec(), exps.into_iter().map(|e| e / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// Set when `p[y]` was zero and had to be clamped to [`PROB_FLOOR`].
    pub clamped: bool,
}

/// `-ln p[y]`.
pub fn cross_entropy(p: &Tensor, y: usize) -> Result<CrossEntropy> {
    let py = *p
        .data()
        .get(y)
        .ok_or_else(|| Error::Argument(format!("class {y} out of range for {} probabilities", p.len())))?;
    let clamped = py <= 0.0;
    Ok(CrossEntropy {
        loss: -py.max(PROB_FLOOR).ln(),
        clamped,
    })
}

/// Gradient of `cross_entropy(softmax(z), y)` with respect to `z`: `p - onehot(y)`.
pub fn softmax_ce_grad(p: &Tensor, y: usize) -> Result<Tensor> {
    if y >= p.len() {
        return Err(Error::Argument(format!("class {y} out of range for {} probabilities", p.len())));
    }
    let mut g = p.clone();
    g.data_mut()[y] -= 1.0;
    Ok(g)
}

/// Softmax as a graph node with the general Jacobian-vector backward
/// `dz = p * (g - <g, p>)`.
#[derive(Clone, Default)]
pub struct Softmax {
    cache: Vec<Tensor>,
}

impl Softmax {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Softmax {
    fn kind(&self) -> LayerKind {
        LayerKind::Softmax
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode, _rng: &mut Rng) -> Result<Tensor> {
        let p = softmax(x)?;
        self.cache.push(p.clone());
        Ok(p)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let p = self
            .cache
            .pop()
            .ok_or_else(|| Error::State("Softmax: backward without forward".into()))?;
        upstream.expect_shape(p.shape(), "Softmax upstream")?;
        let inner = dot(upstream.data(), p.data());
        Tensor::new(
            p.shape().to_vec(),
            p.data()
                .iter()
                .zip(upstream.data())
                .map(|(&pi, &gi)| pi * (gi - inner))
                .collect(),
        )
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_and_shift() {
        let p = softmax(&Tensor::zeros(&[8])).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.125));
        let z = Tensor::from_vec(vec![0.3, -1.2, 4.0, 0.0, 2.2, -0.5, 1.0, 0.7]);
        let a = softmax(&z).unwrap();
        let b = softmax(&z.map(|v| v + 123.0)).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() < 1e-12);
        assert!((a.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ln2_case() {
        let mut z = vec![0.0; 8];
        z[0] = 2f64.ln();
        let p = softmax(&Tensor::from_vec(z)).unwrap();
        assert!((p.data()[0] - 2.0 / 9.0).abs() < 1e-15);
        for &v in &p.data()[1..] {
            assert!((v - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(softmax(&Tensor::from_vec(vec![0.0, f64::NAN])), Err(Error::Numeric(_))));
        assert!(matches!(softmax(&Tensor::from_vec(vec![f64::INFINITY])), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut one = vec![0.0; 8];
        one[3] = 1.0;
        let ce = cross_entropy(&Tensor::from_vec(one), 3).unwrap();
        assert_eq!(ce.loss, 0.0);

        let uniform = Tensor::filled(&[8], 0.125);
        let ce = cross_entropy(&uniform, 5).unwrap();
        assert!((ce.loss - 8f64.ln()).abs() < 1e-15);
        assert!((ce.loss - 2.0794).abs() < 1e-4);

        let g = softmax_ce_grad(&uniform, 0).unwrap();
        assert_eq!(g.data()[0], -0.875);
        assert!(g.data()[1..].iter().all(|&v| v == 0.125));
    }

    #[test]
    fn zero_probability_is_clamped_and_flagged() {
        let ce = cross_entropy(&Tensor::from_vec(vec![1.0, 0.0]), 1).unwrap();
        assert!(ce.clamped);
        assert!((ce.loss - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn jacobian_backward_matches_combined_gradient() {
        let z = Tensor::from_vec(vec![0.1, -0.4, 1.3]);
        let mut sm = Softmax::new();
        let mut rng = Rng::new(0);
        let p = sm.forward(&z, Mode::Eval, &mut rng).unwrap();
        // d(-ln p_y)/dp = -1/p_y at y, chained through the softmax Jacobian.
        let mut up = vec![0.0; 3];
        up[2] = -1.0 / p.data()[2];
        let dz = sm.backward(&Tensor::from_vec(up)).unwrap();
        let expected = softmax_ce_grad(&p, 2).unwrap();
        assert!(dz.sub(&expected).unwrap().max_abs() < 1e-14);
    }
}
