//! Dense rectifier networks with hand-written backpropagation.
//!
//! Hidden layers are `relu` followed by inverted dropout; the last layer is
//! linear and returns logits, so each model applies its own output heads.
//! Batches are row-major `(batch, features)` matrices.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `(inputs, outputs)`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Per-feature affine map `(x - shift) * scale` applied before the first layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub shift: Array1<f64>,
    pub scale: Array1<f64>,
}

impl InputScaling {
    /// Column means and inverse standard deviations of `x`. Near-constant
    /// columns are only centred.
    pub fn fit(x: ArrayView2<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::EmptyInput);
        }
        let shift = x.mean_axis(Axis(0)).expect("non-empty");
        let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-8 { 1.0 / s } else { 1.0 });
        Ok(Self { shift, scale })
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut a = &x - &self.shift;
        a *= &self.scale;
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub dropout: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_scaling: Option<InputScaling>,
}

/// Activations kept from a training forward pass.
pub struct Trace {
    /// Input to each layer (after dropout for hidden layers).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pub pre: Vec<Array2<f64>>,
    /// Scaled keep-masks of each hidden layer, when dropout was active.
    masks: Vec<Option<Array2<f64>>>,
    pub logits: Array2<f64>,
}

pub type Grads = Vec<(Array2<f64>, Array1<f64>)>;

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(sizes: &[usize], dropout: f64, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArchitecture(format!("layer sizes {sizes:?}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidArchitecture(format!("dropout {dropout} outside [0, 1)")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Dense {
                    w: Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-limit..limit)),
                    b: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self { layers, dropout, input_scaling: None })
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense { w: Array2::zeros((w[0], w[1])), b: Array1::zeros(w[1]) })
            .collect();
        Self { layers, dropout: 0.0, input_scaling: None }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map(|l| l.w.ncols()).unwrap_or(0)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_size()];
        s.extend(self.layers.iter().map(|l| l.w.ncols()));
        s
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_size() {
            return Err(Error::DimensionMismatch { expected: self.input_size(), got: x.ncols() });
        }
        if let Some(s) = &self.input_scaling {
            if s.shift.len() != x.ncols() || s.scale.len() != x.ncols() {
                return Err(Error::DimensionMismatch { expected: x.ncols(), got: s.shift.len() });
            }
        }
        Ok(())
    }

    fn scaled(&self, x: ArrayView2<f64>) -> Array2<f64> {
        match &self.input_scaling {
            Some(s) => s.apply(x),
            None => x.to_owned(),
        }
    }

    /// Inference pass (dropout off).
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut a = self.scaled(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.w);
            z += &layer.b;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        Ok(a)
    }

    /// Training pass. Dropout masks are drawn from `rng` when one is given.
    pub fn forward_train(&self, x: ArrayView2<f64>, mut rng: Option<&mut Rng>) -> Result<Trace> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let keep = 1.0 - self.dropout;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut masks = Vec::with_capacity(last);
        let mut a = self.scaled(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.w);
            z += &layer.b;
            inputs.push(a);
            if i == last {
                return Ok(Trace { inputs, pre, masks, logits: z });
            }
            let mut h = z.mapv(|v| v.max(0.0));
            let mask = match rng.as_deref_mut() {
                Some(r) if self.dropout > 0.0 => {
                    let m = Array2::from_shape_simple_fn(h.raw_dim(), || {
                        if r.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    h *= &m;
                    Some(m)
                }
                _ => None,
            };
            pre.push(z);
            masks.push(mask);
            a = h;
        }
        unreachable!("network has at least one layer")
    }

    /// Gradients of the loss whose logit gradient is `d_logits`.
    pub fn backward(&self, trace: &Trace, d_logits: Array2<f64>) -> Grads {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_logits;
        for i in (0..self.layers.len()).rev() {
            let dw = trace.inputs[i].t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut da = delta.dot(&self.layers[i].w.t());
                if let Some(m) = &trace.masks[i - 1] {
                    da *= m;
                }
                Zip::from(&mut da).and(&trace.pre[i - 1]).for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = da;
            }
            grads.push((dw, db));
        }
        grads.reverse();
        grads
    }

    /// Flattened parameter count.
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Mutable access to parameter `k` in flattened order (layer by layer, weights then bias).
    pub fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        for l in &mut self.layers {
            if k < l.w.len() {
                let c = l.w.ncols();
                return &mut l.w[[k / c, k % c]];
            }
            k -= l.w.len();
            if k < l.b.len() {
                return &mut l.b[k];
            }
            k -= l.b.len();
        }
        panic!("parameter index out of range")
    }
}

pub fn grad_norm(g: &Grads) -> f64 {
    g.iter().map(|(w, b)| w.iter().chain(b.iter()).map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales `g` in place so its global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(g: &mut Grads, max_norm: f64) -> f64 {
    let n = grad_norm(g);
    if n > max_norm && n > 0.0 {
        let k = max_norm / n;
        for (w, b) in g.iter_mut() {
            w.mapv_inplace(|v| v * k);
            b.mapv_inplace(|v| v * k);
        }
    }
    n
}

/// Flattens gradients in the same order as [`Mlp::param_mut`].
pub fn flatten_grads(g: &Grads) -> Vec<f64> {
    g.iter().flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>()).collect()
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + g`, `theta <- theta - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Grads,
}

impl Sgd {
    pub fn new(net: &Mlp, momentum: f64) -> Self {
        let velocity = net
            .layers
            .iter()
            .map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.raw_dim())))
            .collect();
        Self { momentum, velocity }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Grads, lr: f64) {
        for ((layer, (gw, gb)), (vw, vb)) in net.layers.iter_mut().zip(grads).zip(&mut self.velocity) {
            let m = self.momentum;
            Zip::from(&mut *vw).and(gw).for_each(|v, &g| *v = m * *v + g);
            Zip::from(&mut *vb).and(gb).for_each(|v, &g| *v = m * *v + g);
            if lr != 0.0 {
                layer.w.scaled_add(-lr, vw);
                layer.b.scaled_add(-lr, vb);
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Grads,
    v: Grads,
}

impl Adam {
    pub fn new(net: &Mlp) -> Self {
        let zeros: Grads =
            net.layers.iter().map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.raw_dim()))).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Grads, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = lr * c2.sqrt() / c1;
        let upd = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            if lr != 0.0 {
                *p -= step * *m / (v.sqrt() + eps * c2.sqrt());
            }
        };
        for ((layer, (gw, gb)), ((mw, mb), (vw, vb))) in
            net.layers.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            Zip::from(&mut layer.w).and(&mut *mw).and(&mut *vw).and(gw).for_each(|p, m, v, &g| upd(p, m, v, g));
            Zip::from(&mut layer.b).and(&mut *mb).and(&mut *vb).and(gb).for_each(|p, m, v, &g| upd(p, m, v, g));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerSpec {
    Sgd { momentum: f64 },
    Adam,
}

impl OptimizerSpec {
    pub fn build(&self, net: &Mlp) -> Optimizer {
        match *self {
            OptimizerSpec::Sgd { momentum } => Optimizer::Sgd(Sgd::new(net, momentum)),
            OptimizerSpec::Adam => Optimizer::Adam(Adam::new(net)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerSpec::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::Config("momentum must be in [0, 1)".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, net: &mut Mlp, grads: &Grads, lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.step(net, grads, lr),
            Optimizer::Adam(o) => o.step(net, grads, lr),
        }
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Chain rule through softmax: `dz_j = p_j * (g_j - sum_k g_k p_k)`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pj, gj)| pj * (gj - dot)).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Central-difference gradient of `loss` with respect to every parameter of `net`.
pub fn numeric_grad(net: &Mlp, h: f64, mut loss: impl FnMut(&Mlp) -> f64) -> Vec<f64> {
    let mut probe = net.clone();
    (0..net.num_params())
        .map(|k| {
            let orig = *probe.param_mut(k);
            *probe.param_mut(k) = orig + h;
            let up = loss(&probe);
            *probe.param_mut(k) = orig - h;
            let down = loss(&probe);
            *probe.param_mut(k) = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between two gradient vectors, with an absolute
/// floor on the denominator so near-zero entries don't dominate.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
