//! Parameter updates, L2 regularization and the mini-batch training loop.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{cross_entropy, softmax, softmax_ce_grad, Mode, Param};
use crate::model::Network;
use crate::tensor::{Rng, Tensor};

/// Plain gradient descent, `theta <- theta - alpha * grad`.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[&Tensor], alpha: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dimension(format!(
            "sgd_step: {} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        g.expect_shape(p.shape(), "sgd_step gradient")?;
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= alpha * d;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        AdamState {
            config,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn for_params(config: AdamConfig, params: &[&Param]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.value.shape()).collect();
        Self::new(config, &shapes)
    }

    /// One update of every tensor in `params` from the matching `grads`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "adam_step: state tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            p.expect_shape(m.shape(), "adam_step parameter")?;
            g.expect_shape(m.shape(), "adam_step gradient")?;
        }
        self.t += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Convenience wrapper updating `Param`s from their accumulated gradients.
    pub fn step_params(&mut self, params: &mut [&mut Param]) -> Result<()> {
        let grads: Vec<Tensor> = params.iter().map(|p| p.grad.clone()).collect();
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let mut values: Vec<&mut Tensor> = params.iter_mut().map(|p| &mut p.value).collect();
        self.step(&mut values, &grad_refs)
    }
}

/// `gamma * sum(W^2)` over `weights` and its gradient `2 gamma W` per tensor.
pub fn l2_penalty(weights: &[&Tensor], gamma: f64) -> Result<(f64, Vec<Tensor>)> {
    if gamma < 0.0 {
        return Err(Error::Argument(format!("L2 strength must be >= 0, got {gamma}")));
    }
    let penalty = gamma * weights.iter().map(|w| w.sum_squares()).sum::<f64>();
    let grads = weights.iter().map(|w| w.scale(2.0 * gamma)).collect();
    Ok((penalty, grads))
}

/// Adds the L2 gradient to every parameter flagged for decay and returns
/// the penalty value.
pub fn apply_l2(params: &mut [&mut Param], gamma: f64) -> Result<f64> {
    if gamma < 0.0 {
        return Err(Error::Argument(format!("L2 strength must be >= 0, got {gamma}")));
    }
    let mut penalty = 0.0;
    for p in params.iter_mut().filter(|p| p.decay) {
        penalty += p.value.sum_squares();
        if gamma > 0.0 {
            for (g, w) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
                *g += 2.0 * gamma * w;
            }
        }
    }
    Ok(gamma * penalty)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// L2 strength applied to weights and kernels.
    pub l2_strength: f64,
    pub dropout: f64,
    /// Number of full passes over the training set.
    pub max_iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2_strength: 0.01,
            dropout: 0.5,
            max_iterations: 2,
            batch_size: 32,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2_strength >= 0.0) {
            return Err(Error::Argument(format!("l2_strength must be >= 0, got {}", self.l2_strength)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Argument("max_iterations must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be >= 1".into()));
        }
        if !(self.adam.learning_rate >= 0.0) {
            return Err(Error::Argument("learning rate must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub l2_penalty: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub trace: Vec<LossRecord>,
    pub adam_steps: u64,
    /// Number of samples whose target probability underflowed to zero.
    pub clamped: usize,
}

/// A labeled training example: input tensor and class index.
pub type Example<'a> = (&'a Tensor, usize);

/// Runs `cfg.max_iterations` epochs of Adam on mean cross-entropy plus L2,
/// with training-mode dropout. Each epoch visits the examples in a fresh
/// seeded permutation split into batches of `cfg.batch_size`.
pub fn train<N: Network + ?Sized>(
    model: &mut N,
    data: &[Example<'_>],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let classes = model.num_classes();
    if let Some((_, y)) = data.iter().find(|(_, y)| *y >= classes) {
        return Err(Error::Argument(format!(
            "label {y} exceeds model output arity {classes}"
        )));
    }
    model.set_dropout(cfg.dropout)?;
    let mut adam = AdamState::for_params(cfg.adam, &model.params());
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.max_iterations {
        rng.shuffle(&mut order);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            for p in model.params_mut() {
                p.zero_grad();
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            for &idx in chunk {
                let (x, y) = data[idx];
                let logits = model.forward(x, Mode::Train, rng)?;
                let p = softmax(&logits).map_err(|e| {
                    e.context(format!("epoch {epoch}, batch {batch}: non-finite logits"))
                })?;
                let ce = cross_entropy(&p, y)?;
                report.clamped += usize::from(ce.clamped);
                loss += ce.loss * scale;
                let grad = softmax_ce_grad(&p, y)?.scale(scale);
                model.backward(&grad)?;
            }
            model.clear_cache();
            let l2 = apply_l2(&mut model.params_mut(), cfg.l2_strength)?;
            if !(loss + l2).is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {batch} (ce {loss}, l2 {l2})"
                )));
            }
            adam.step_params(&mut model.params_mut())?;
            report.adam_steps += 1;
            report.trace.push(LossRecord {
                epoch,
                batch,
                loss,
                l2_penalty: l2,
            });
        }
    }
    Ok(report)
}

/// Writes a loss trace as CSV with columns `epoch,batch,loss,l2_penalty`.
pub fn write_loss_csv(trace: &[LossRecord], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,batch,loss,l2_penalty\n");
    for r in trace {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.batch, r.loss, r.l2_penalty));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        let mut p = Tensor::from_vec(vec![1.0]);
        sgd_step(&mut [&mut p], &[&Tensor::from_vec(vec![2.0])], 0.5).unwrap();
        assert_eq!(p.data(), &[0.0]);

        let mut p = Tensor::from_vec(vec![1.0, -3.0]);
        sgd_step(&mut [&mut p], &[&Tensor::zeros(&[2])], 0.5).unwrap();
        assert_eq!(p.data(), &[1.0, -3.0]);
        sgd_step(&mut [&mut p], &[&Tensor::from_vec(vec![4.0, 4.0])], 0.0).unwrap();
        assert_eq!(p.data(), &[1.0, -3.0]);

        assert!(sgd_step(&mut [&mut p], &[&Tensor::zeros(&[3])], 0.1).is_err());
    }

    #[test]
    fn sgd_is_bit_exact() {
        let mut rng = Rng::new(8);
        let before = Tensor::rand_uniform(&mut rng, &[50], -3.0, 3.0).unwrap();
        let g = Tensor::rand_uniform(&mut rng, &[50], -3.0, 3.0).unwrap();
        let mut p = before.clone();
        sgd_step(&mut [&mut p], &[&g], 0.37).unwrap();
        for i in 0..50 {
            assert_eq!(p.data()[i].to_bits(), (before.data()[i] - 0.37 * g.data()[i]).to_bits());
        }
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::from_vec(vec![0.3, -0.2]);
        let mut st = AdamState::new(cfg, &[&[2]]);
        st.step(&mut [&mut p], &[&Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p.data(), &[0.3, -0.2]);

        let mut p = Tensor::from_vec(vec![0.0, 0.0]);
        let mut st = AdamState::new(cfg, &[&[2]]);
        st.step(&mut [&mut p], &[&Tensor::filled(&[2], 1.0)]).unwrap();
        for &v in p.data() {
            assert!((v + 0.001).abs() < 1e-6);
        }

        let mut a = Tensor::from_vec(vec![0.0]);
        let mut b = Tensor::from_vec(vec![0.0]);
        let mut st = AdamState::new(cfg, &[&[1], &[1]]);
        st.step(&mut [&mut a, &mut b], &[&Tensor::from_vec(vec![1.0]), &Tensor::from_vec(vec![100.0])])
            .unwrap();
        assert!((a.data()[0].abs() - b.data()[0].abs()).abs() < 1e-4);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut st = AdamState::new(AdamConfig::default(), &[&[2]]);
        let mut p = Tensor::zeros(&[3]);
        assert!(st.step(&mut [&mut p], &[&Tensor::zeros(&[3])]).is_err());
    }

    #[test]
    fn adam_second_moment_stays_nonnegative() {
        let mut rng = Rng::new(12);
        let mut p = Tensor::rand_uniform(&mut rng, &[20], -1.0, 1.0).unwrap();
        let mut st = AdamState::new(AdamConfig::default(), &[&[20]]);
        for _ in 0..50 {
            let g = Tensor::rand_uniform(&mut rng, &[20], -5.0, 5.0).unwrap();
            st.step(&mut [&mut p], &[&g]).unwrap();
            assert!(st.v[0].data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn l2_examples() {
        let w = Tensor::from_vec(vec![1.0, 2.0]);
        let (pen, g) = l2_penalty(&[&w], 0.01).unwrap();
        assert!((pen - 0.05).abs() < 1e-15);
        assert_eq!(g[0].data(), &[0.02, 0.04]);

        let (pen, g) = l2_penalty(&[&w], 0.0).unwrap();
        assert_eq!(pen, 0.0);
        assert!(g[0].data().iter().all(|&v| v == 0.0));
        assert!(l2_penalty(&[&w], -1.0).is_err());
    }

    #[test]
    fn l2_gradient_matches_finite_differences() {
        let mut rng = Rng::new(21);
        for _ in 0..20 {
            let w = Tensor::rand_uniform(&mut rng, &[7], -2.0, 2.0).unwrap();
            let gamma = 0.01;
            let (_, g) = l2_penalty(&[&w], gamma).unwrap();
            let eps = 1e-5;
            let mut num = vec![0.0; 7];
            for i in 0..7 {
                let mut plus = w.clone();
                plus.data_mut()[i] += eps;
                let mut minus = w.clone();
                minus.data_mut()[i] -= eps;
                let fp = gamma * plus.sum_squares();
                let fm = gamma * minus.sum_squares();
                num[i] = (fp - fm) / (2.0 * eps);
            }
            let num = Tensor::from_vec(num);
            let rel = g[0].sub(&num).unwrap().sum_squares().sqrt()
                / (g[0].sum_squares().sqrt() + num.sum_squares().sqrt());
            assert!(rel < 1e-8, "rel {rel}");
        }
    }

    #[test]
    fn decay_shrinks_weights_without_data_gradient() {
        let mut w = Param::new("w", Tensor::from_vec(vec![0.5, -1.0, 2.0]), true);
        let mut adam = AdamState::for_params(AdamConfig::default(), &[&w]);
        let mut norm = w.value.sum_squares();
        for _ in 0..20 {
            w.zero_grad();
            apply_l2(&mut [&mut w], 0.01).unwrap();
            adam.step_params(&mut [&mut w]).unwrap();
            let next = w.value.sum_squares();
            assert!(next < norm);
            norm = next;
        }
    }

    #[test]
    fn biases_are_not_decayed() {
        let mut b = Param::new("b", Tensor::from_vec(vec![3.0]), false);
        let pen = apply_l2(&mut [&mut b], 0.5).unwrap();
        assert_eq!(pen, 0.0);
        assert_eq!(b.grad.data(), &[0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            max_iterations: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            dropout: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let parsed: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"bogus": 1}"#);
        assert!(parsed.is_err());
    }
}
