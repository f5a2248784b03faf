//! Finite-difference verification of every backward pass.
//!
//! Each check draws random small instances, contracts the layer output
//! with a random direction `r` to get a scalar objective `<r, f(x)>`, and
//! compares the analytic input and parameter gradients with central
//! differences. The error measure is `|a - n| / (|a| + |n|)` in the
//! Euclidean norm, taken as zero when both vectors vanish.

use serde::Serialize;

use crate::error::Result;
use crate::layers::{
    cross_entropy, softmax, softmax_ce_grad, Activation, Conv1d, Dropout, Fc, Layer, LayerKind, Lstm, MaxPool, Mode,
    Param, Softmax,
};
use crate::model::{ArchConfig, CompositeModel, Network};
use crate::optim::l2_penalty;
use crate::tensor::{dot, mix_seed, Rng, Tensor};

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub seed: u64,
    /// Corrupts the backward pass of this layer kind; a negative control.
    pub tamper: Option<LayerKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            instances: DEFAULT_INSTANCES,
            seed: 0,
            tamper: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub worst_input: f64,
    pub worst_param: f64,
}

impl CheckResult {
    pub fn worst(&self) -> f64 {
        self.worst_input.max(self.worst_param)
    }

    pub fn passed(&self) -> bool {
        self.worst() < TOLERANCE
    }

    fn absorb(&mut self, (input, param): (f64, f64)) {
        self.worst_input = self.worst_input.max(input);
        self.worst_param = self.worst_param.max(param);
        self.instances += 1;
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let denom = norm(analytic) + norm(numeric);
    if denom == 0.0 {
        0.0
    } else {
        norm(&diff) / denom
    }
}

/// Central differences of `f` over `n` coordinates. `f(i, delta)` must
/// evaluate the objective with coordinate `i` shifted by `delta` and
/// leave the coordinate unchanged afterwards.
fn central_differences(n: usize, mut f: impl FnMut(usize, f64) -> Result<f64>) -> Result<Vec<f64>> {
    (0..n)
        .map(|i| Ok((f(i, EPSILON)? - f(i, -EPSILON)?) / (2.0 * EPSILON)))
        .collect()
}

fn shifted(t: &mut Tensor, i: usize, delta: f64, f: impl FnOnce(&Tensor) -> Result<f64>) -> Result<f64> {
    let orig = t.data()[i];
    t.data_mut()[i] = orig + delta;
    let out = f(t);
    t.data_mut()[i] = orig;
    out
}

fn flat_grads(params: &[&Param]) -> Vec<f64> {
    params.iter().flat_map(|p| p.grad.data().iter().copied()).collect()
}

fn param_locations(params: &[&Param]) -> Vec<(usize, usize)> {
    params
        .iter()
        .enumerate()
        .flat_map(|(k, p)| (0..p.value.len()).map(move |i| (k, i)))
        .collect()
}

/// A layer whose backward pass overstates every gradient by 1%.
struct Tampered(Box<dyn Layer>);

impl Layer for Tampered {
    fn kind(&self) -> LayerKind {
        self.0.kind()
    }

    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        self.0.forward(x, mode, rng)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let dx = self.0.backward(upstream)?;
        for p in self.0.params_mut() {
            p.grad = p.grad.scale(1.01);
        }
        Ok(dx.scale(1.01))
    }

    fn params(&self) -> Vec<&Param> {
        self.0.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.0.params_mut()
    }

    fn clear_cache(&mut self) {
        self.0.clear_cache()
    }
}

/// Errors for one layer instance under the objective `<r, f(x)>`. The
/// dropout mask is reproduced on every evaluation by reseeding.
fn layer_errors(layer: &mut dyn Layer, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<(f64, f64)> {
    let mask_seed = rng.next_u64();
    let y = layer.forward(x, mode, &mut Rng::new(mask_seed))?;
    let r = Tensor::rand_uniform(rng, y.shape(), -1.0, 1.0)?;
    for p in layer.params_mut() {
        p.zero_grad();
    }
    let dx = layer.backward(&r)?;
    let analytic_params = flat_grads(&layer.params());

    let objective = |layer: &mut dyn Layer, x: &Tensor| -> Result<f64> {
        let out = layer.forward(x, mode, &mut Rng::new(mask_seed))?;
        layer.clear_cache();
        Ok(dot(out.data(), r.data()))
    };
    let mut xp = x.clone();
    let numeric_dx = central_differences(x.len(), |i, d| shifted(&mut xp, i, d, |xs| objective(layer, xs)))?;

    let locations = param_locations(&layer.params());
    let numeric_params = central_differences(locations.len(), |j, d| {
        let (k, i) = locations[j];
        let orig = layer.params()[k].value.data()[i];
        layer.params_mut()[k].value.data_mut()[i] = orig + d;
        let out = objective(layer, x);
        layer.params_mut()[k].value.data_mut()[i] = orig;
        out
    })?;
    Ok((
        relative_error(dx.data(), &numeric_dx),
        relative_error(&analytic_params, &numeric_params),
    ))
}

fn uniform(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::rand_uniform(rng, shape, -scale, scale).expect("positive scale")
}

fn activation_for(instance: usize) -> Activation {
    if instance.is_multiple_of(2) {
        Activation::Relu
    } else {
        Activation::Identity
    }
}

fn instance_layer(kind: LayerKind, instance: usize, rng: &mut Rng) -> Result<(Box<dyn Layer>, Tensor, Mode)> {
    Ok(match kind {
        LayerKind::Fc => {
            let (n_in, n_out) = (2 + rng.below(5), 1 + rng.below(5));
            let fc = Fc::from_params(
                "fc",
                uniform(rng, &[n_out, n_in], 1.0),
                uniform(rng, &[n_out], 0.5),
                activation_for(instance),
            )?;
            (Box::new(fc), uniform(rng, &[n_in], 1.0), Mode::Eval)
        }
        LayerKind::Conv1d => {
            let (c_in, k, w, len) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(4), 8 + rng.below(6));
            let conv = Conv1d::from_params(
                "conv",
                uniform(rng, &[k, c_in, w], 1.0),
                uniform(rng, &[k], 0.5),
                activation_for(instance),
            )?;
            (Box::new(conv), uniform(rng, &[c_in, len], 1.0), Mode::Eval)
        }
        LayerKind::MaxPool => {
            // Distinct, well separated levels keep every maximum away from a tie.
            let (c, region) = (1 + rng.below(3), 2 + rng.below(3));
            let len = region * (2 + rng.below(3)) + rng.below(region);
            let mut levels: Vec<f64> = (0..c * len).map(|i| i as f64 * 0.1).collect();
            rng.shuffle(&mut levels);
            (Box::new(MaxPool::new(region)), Tensor::new(vec![c, len], levels)?, Mode::Eval)
        }
        LayerKind::Lstm => {
            let (n_in, hid, steps) = (2 + rng.below(3), 2 + rng.below(3), 5);
            let mut lstm = Lstm::new("lstm", n_in, hid, 1.0, rng);
            for p in lstm.params_mut() {
                p.value = uniform(rng, p.value.shape(), 0.8);
            }
            (Box::new(lstm), uniform(rng, &[steps, n_in], 1.0), Mode::Eval)
        }
        LayerKind::Softmax => (Box::new(Softmax::new()), uniform(rng, &[8], 3.0), Mode::Eval),
        LayerKind::Dropout => {
            let mode = if instance.is_multiple_of(2) { Mode::Eval } else { Mode::Train };
            let len = 3 + rng.below(6);
            (Box::new(Dropout::new(0.5)?), uniform(rng, &[len], 1.0), mode)
        }
    })
}

/// Softmax followed by cross-entropy, through the fused `p - onehot(y)`.
fn softmax_ce_error(rng: &mut Rng) -> Result<f64> {
    let mut z = uniform(rng, &[8], 3.0);
    let y = rng.below(8);
    let analytic = softmax_ce_grad(&softmax(&z)?, y)?;
    let numeric = central_differences(z.len(), |i, d| {
        shifted(&mut z, i, d, |zs| Ok(cross_entropy(&softmax(zs)?, y)?.loss))
    })?;
    Ok(relative_error(analytic.data(), &numeric))
}

pub fn check_layer(kind: LayerKind, opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut rng = Rng::new(mix_seed(&[opts.seed, kind as u64]));
    let mut result = CheckResult {
        name: kind.name().to_string(),
        instances: 0,
        worst_input: 0.0,
        worst_param: 0.0,
    };
    for instance in 0..opts.instances {
        let (layer, x, mode) = instance_layer(kind, instance, &mut rng)?;
        let mut layer = if opts.tamper == Some(kind) {
            Box::new(Tampered(layer))
        } else {
            layer
        };
        let (mut input, param) = layer_errors(layer.as_mut(), &x, mode, &mut rng)?;
        if kind == LayerKind::Softmax {
            input = input.max(softmax_ce_error(&mut rng)?);
        }
        result.absorb((input, param));
    }
    if kind == LayerKind::Softmax {
        result.name = "Softmax+CE".into();
    }
    Ok(result)
}

/// The L2 objective `gamma * sum W^2` against its closed-form gradient.
pub fn check_l2(opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut rng = Rng::new(mix_seed(&[opts.seed, 100]));
    let mut result = CheckResult {
        name: "L2 penalty".into(),
        instances: 0,
        worst_input: 0.0,
        worst_param: 0.0,
    };
    for _ in 0..opts.instances {
        let gamma = rng.uniform(0.001, 0.1);
        let mut weights = [uniform(&mut rng, &[3, 4], 1.0), uniform(&mut rng, &[5], 1.0)];
        let (_, grads) = l2_penalty(&weights.iter().collect::<Vec<_>>(), gamma)?;
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
        let locations: Vec<(usize, usize)> = weights
            .iter()
            .enumerate()
            .flat_map(|(k, w)| (0..w.len()).map(move |i| (k, i)))
            .collect();
        let numeric = central_differences(locations.len(), |j, d| {
            let (k, i) = locations[j];
            let orig = weights[k].data()[i];
            weights[k].data_mut()[i] = orig + d;
            let value = l2_penalty(&weights.iter().collect::<Vec<_>>(), gamma).map(|(v, _)| v);
            weights[k].data_mut()[i] = orig;
            value
        })?;
        result.absorb((0.0, relative_error(&analytic, &numeric)));
    }
    Ok(result)
}

/// The tiny end-to-end configuration: `h = 4`, `d = 8`, two kernels per
/// convolution.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        conv1_kernels: 2,
        conv2_kernels: 2,
        feature_dim: 8,
        lstm_hidden: 4,
        fc1_dim: 4,
        ..ArchConfig::default()
    }
}

/// Cross-entropy of the full model against finite differences over every
/// parameter and every input sample.
pub fn check_composite(opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut rng = Rng::new(mix_seed(&[opts.seed, 200]));
    let mut result = CheckResult {
        name: "Composite".into(),
        instances: 0,
        worst_input: 0.0,
        worst_param: 0.0,
    };
    let arch = tiny_arch();
    for _ in 0..opts.instances {
        let mut model = CompositeModel::new(&arch, &mut rng)?;
        for p in model.params_mut() {
            if !p.decay {
                p.value = uniform(&mut rng, p.value.shape(), 0.2);
            }
        }
        let x = uniform(&mut rng, &[3, 300], 1.0);
        let y = rng.below(arch.classes);

        let z = model.forward(&x, Mode::Eval, &mut rng)?;
        for p in model.params_mut() {
            p.zero_grad();
        }
        let dx = model.backward(&softmax_ce_grad(&softmax(&z)?, y)?)?;
        let analytic_params = flat_grads(&model.params());

        let loss = |m: &CompositeModel, xs: &Tensor| -> Result<f64> { Ok(cross_entropy(&softmax(&m.logits(xs)?)?, y)?.loss) };
        let mut xp = x.clone();
        let numeric_dx = central_differences(x.len(), |i, d| shifted(&mut xp, i, d, |xs| loss(&model, xs)))?;
        let locations = param_locations(&model.params());
        let numeric_params = central_differences(locations.len(), |j, d| {
            let (k, i) = locations[j];
            let orig = model.params()[k].value.data()[i];
            model.params_mut()[k].value.data_mut()[i] = orig + d;
            let out = loss(&model, &x);
            model.params_mut()[k].value.data_mut()[i] = orig;
            out
        })?;
        result.absorb((
            relative_error(dx.data(), &numeric_dx),
            relative_error(&analytic_params, &numeric_params),
        ));
    }
    Ok(result)
}

/// The six layer kinds followed by the end-to-end composite check.
pub fn run_suite(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut out = LayerKind::ALL
        .iter()
        .map(|&k| check_layer(k, opts))
        .collect::<Result<Vec<_>>>()?;
    out.push(check_composite(opts)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0], &[-1.0]) - 1.0).abs() < 1e-15);
        assert!((relative_error(&[3.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn every_layer_kind_passes() {
        let opts = GradcheckOptions::default();
        for kind in LayerKind::ALL {
            let r = check_layer(kind, &opts).unwrap();
            assert_eq!(r.instances, DEFAULT_INSTANCES);
            assert!(r.passed(), "{} worst {:e}", r.name, r.worst());
        }
    }

    #[test]
    fn l2_passes() {
        let r = check_l2(&GradcheckOptions::default()).unwrap();
        assert!(r.passed(), "{:e}", r.worst());
    }

    #[test]
    fn tampered_fc_fails_and_others_do_not() {
        let opts = GradcheckOptions {
            instances: 4,
            tamper: Some(LayerKind::Fc),
            ..GradcheckOptions::default()
        };
        assert!(!check_layer(LayerKind::Fc, &opts).unwrap().passed());
        assert!(check_layer(LayerKind::Conv1d, &opts).unwrap().passed());
    }

    #[test]
    fn composite_passes_on_a_few_instances() {
        let opts = GradcheckOptions {
            instances: 2,
            ..GradcheckOptions::default()
        };
        let r = check_composite(&opts).unwrap();
        assert!(r.passed(), "input {:e} param {:e}", r.worst_input, r.worst_param);
    }
}
