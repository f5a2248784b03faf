use super::{glorot, Layer, LayerKind, Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::{dot, sigmoid, Rng, Tensor};

/// Gate order used for parameter storage and naming.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Candidate = 3,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Output, Gate::Candidate];

    fn suffix(self) -> &'static str {
        match self {
            Gate::Input => "i",
            Gate::Forget => "f",
            Gate::Output => "o",
            Gate::Candidate => "g",
        }
    }
}

#[derive(Clone)]
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates in [`Gate`] order.
    gates: [Vec<f64>; 4],
    tanh_c: Vec<f64>,
}

/// Long short-term memory layer.
///
/// Per step: `i, f, o = sigmoid(W x + U h_prev + b)`, `g = tanh(...)`,
/// `c = f * c_prev + i * g`, `h = o * tanh(c)`. As a graph node it maps a
/// `[T x in]` sequence to the `[T x h]` stack of hidden states `s_1..s_T`,
/// starting from zero state.
#[derive(Clone)]
pub struct Lstm {
    pub w: [Param; 4],
    pub u: [Param; 4],
    pub b: [Param; 4],
    cache: Vec<Vec<StepCache>>,
}

impl Lstm {
    pub fn new(name: &str, input: usize, hidden: usize, forget_bias: f64, rng: &mut Rng) -> Self {
        let w = Gate::ALL.map(|g| {
            Param::new(
                format!("{name}.w_{}", g.suffix()),
                glorot(rng, &[hidden, input], input, hidden),
                true,
            )
        });
        let u = Gate::ALL.map(|g| {
            Param::new(
                format!("{name}.u_{}", g.suffix()),
                glorot(rng, &[hidden, hidden], hidden, hidden),
                true,
            )
        });
        let b = Gate::ALL.map(|g| {
            let init = if g == Gate::Forget { forget_bias } else { 0.0 };
            Param::new(format!("{name}.b_{}", g.suffix()), Tensor::filled(&[hidden], init), false)
        });
        Lstm {
            w,
            u,
            b,
            cache: Vec::new(),
        }
    }

    /// Builds a layer with every weight and bias set to zero.
    pub fn zeros(name: &str, input: usize, hidden: usize) -> Self {
        let mut l = Lstm::new(name, input, hidden, 0.0, &mut Rng::new(0));
        for p in l.params_mut() {
            p.value.fill(0.0);
        }
        l
    }

    pub fn input_size(&self) -> usize {
        self.w[0].value.shape()[1]
    }

    pub fn hidden_size(&self) -> usize {
        self.w[0].value.shape()[0]
    }

    fn step_inner(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> StepCache {
        let h = self.hidden_size();
        let n_in = self.input_size();
        let gates = Gate::ALL.map(|g| {
            let gi = g as usize;
            let (w, u, b) = (self.w[gi].value.data(), self.u[gi].value.data(), self.b[gi].value.data());
            (0..h)
                .map(|r| {
                    let a = b[r] + dot(&w[r * n_in..(r + 1) * n_in], x) + dot(&u[r * h..(r + 1) * h], h_prev);
                    if g == Gate::Candidate {
                        a.tanh()
                    } else {
                        sigmoid(a)
                    }
                })
                .collect::<Vec<f64>>()
        });
        let c: Vec<f64> = (0..h)
            .map(|r| gates[1][r] * c_prev[r] + gates[0][r] * gates[3][r])
            .collect();
        StepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            tanh_c: c.iter().map(|v| v.tanh()).collect(),
            gates,
        }
    }

    fn check_step_shapes(&self, x: usize, h: usize, c: usize) -> Result<()> {
        let (n_in, hid) = (self.input_size(), self.hidden_size());
        if x != n_in || h != hid || c != hid {
            return Err(Error::Dimension(format!(
                "LSTM step: got x[{x}], h[{h}], c[{c}]; expected x[{n_in}], h[{hid}], c[{hid}]"
            )));
        }
        Ok(())
    }

    /// One gated update, returning `(h_t, c_t)`.
    pub fn step(&self, x: &Tensor, h_prev: &Tensor, c_prev: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_step_shapes(x.len(), h_prev.len(), c_prev.len())?;
        let s = self.step_inner(x.data(), h_prev.data(), c_prev.data());
        let c: Vec<f64> = (0..self.hidden_size())
            .map(|r| s.gates[1][r] * s.c_prev[r] + s.gates[0][r] * s.gates[3][r])
            .collect();
        let h: Vec<f64> = s.gates[2].iter().zip(&s.tanh_c).map(|(o, t)| o * t).collect();
        Ok((Tensor::from_vec(h), Tensor::from_vec(c)))
    }

    fn run(&self, xs: &Tensor) -> Result<(Tensor, Vec<StepCache>)> {
        if xs.shape().len() != 2 || xs.shape()[1] != self.input_size() {
            return Err(Error::Dimension(format!(
                "LSTM: expected sequence [T x {}], got {:?}",
                self.input_size(),
                xs.shape()
            )));
        }
        let (steps, n_in, hid) = (xs.shape()[0], self.input_size(), self.hidden_size());
        let mut h = vec![0.0; hid];
        let mut c = vec![0.0; hid];
        let mut out = Vec::with_capacity(steps * hid);
        let mut caches = Vec::with_capacity(steps);
        for t in 0..steps {
            let s = self.step_inner(&xs.data()[t * n_in..(t + 1) * n_in], &h, &c);
            c = (0..hid)
                .map(|r| s.gates[1][r] * s.c_prev[r] + s.gates[0][r] * s.gates[3][r])
                .collect();
            h = s.gates[2].iter().zip(&s.tanh_c).map(|(o, t)| o * t).collect();
            out.extend_from_slice(&h);
            caches.push(s);
        }
        Ok((Tensor::new(vec![steps, hid], out)?, caches))
    }

    /// Hidden states for every step, without caching.
    pub fn apply(&self, xs: &Tensor) -> Result<Tensor> {
        self.run(xs).map(|(t, _)| t)
    }
}

/// Free-function form of [`Lstm::step`].
pub fn lstm_step(p: &Lstm, x: &Tensor, h_prev: &Tensor, c_prev: &Tensor) -> Result<(Tensor, Tensor)> {
    p.step(x, h_prev, c_prev)
}

impl Layer for Lstm {
    fn kind(&self) -> LayerKind {
        LayerKind::Lstm
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode, _rng: &mut Rng) -> Result<Tensor> {
        let (out, caches) = self.run(x)?;
        self.cache.push(caches);
        Ok(out)
    }

    /// Backpropagation through time. `upstream[t]` is the gradient with
    /// respect to `s_{t+1}`.
    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let caches = self
            .cache
            .pop()
            .ok_or_else(|| Error::State("LSTM: backward without forward".into()))?;
        let (steps, n_in, hid) = (caches.len(), self.input_size(), self.hidden_size());
        upstream.expect_shape(&[steps, hid], "LSTM upstream")?;
        let mut dxs = vec![0.0; steps * n_in];
        let mut dh_next = vec![0.0; hid];
        let mut dc_next = vec![0.0; hid];
        for t in (0..steps).rev() {
            let s = &caches[t];
            let [gi, gf, go, gg] = &s.gates;
            let mut da = [vec![0.0; hid], vec![0.0; hid], vec![0.0; hid], vec![0.0; hid]];
            for r in 0..hid {
                let dh = upstream.data()[t * hid + r] + dh_next[r];
                let dc = dc_next[r] + dh * go[r] * (1.0 - s.tanh_c[r] * s.tanh_c[r]);
                da[0][r] = dc * gg[r] * gi[r] * (1.0 - gi[r]);
                da[1][r] = dc * s.c_prev[r] * gf[r] * (1.0 - gf[r]);
                da[2][r] = dh * s.tanh_c[r] * go[r] * (1.0 - go[r]);
                da[3][r] = dc * gi[r] * (1.0 - gg[r] * gg[r]);
                dc_next[r] = dc * gf[r];
            }
            dh_next.fill(0.0);
            let dx = &mut dxs[t * n_in..(t + 1) * n_in];
            for g in 0..4 {
                let w = self.w[g].value.data();
                let u = self.u[g].value.data();
                let dw = self.w[g].grad.data_mut();
                for r in 0..hid {
                    let a = da[g][r];
                    if a == 0.0 {
                        continue;
                    }
                    for i in 0..n_in {
                        dw[r * n_in + i] += a * s.x[i];
                        dx[i] += a * w[r * n_in + i];
                    }
                }
                let du = self.u[g].grad.data_mut();
                for r in 0..hid {
                    let a = da[g][r];
                    if a == 0.0 {
                        continue;
                    }
                    for j in 0..hid {
                        du[r * hid + j] += a * s.h_prev[j];
                        dh_next[j] += a * u[r * hid + j];
                    }
                }
                for (db, a) in self.b[g].grad.data_mut().iter_mut().zip(&da[g]) {
                    *db += a;
                }
            }
        }
        Tensor::new(vec![steps, n_in], dxs)
    }

    fn params(&self) -> Vec<&Param> {
        self.w.iter().chain(&self.u).chain(&self.b).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.w.iter_mut().chain(self.u.iter_mut()).chain(self.b.iter_mut()).collect()
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}
