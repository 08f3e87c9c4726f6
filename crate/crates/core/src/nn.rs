//! Minimal feed-forward networks with manual backpropagation and Adam.
//!
//! Batches are `n × d` matrices with one sample per row.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dense {
    pub w: DMatrix<f64>,
    pub b: DMatrix<f64>,
    #[serde(skip)]
    input: Option<DMatrix<f64>>,
    #[serde(skip)]
    grad_w: Option<DMatrix<f64>>,
    #[serde(skip)]
    grad_b: Option<DMatrix<f64>>,
}

impl Dense {
    /// He-style uniform initialisation, zero bias.
    pub fn he_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        let w = DMatrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..limit));
        Self::from_parts(w, DMatrix::zeros(1, fan_out))
    }

    pub fn from_parts(w: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        Self {
            w,
            b,
            input: None,
            grad_w: None,
            grad_b: None,
        }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.w;
        for (j, mut col) in y.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.b[(0, j)]);
        }
        y
    }

    fn backward(&mut self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let x = self.input.as_ref().expect("forward before backward");
        self.grad_w = Some(x.transpose() * g);
        self.grad_b = Some(DMatrix::from_fn(1, g.ncols(), |_, j| g.column(j).sum()));
        g * self.w.transpose()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    #[serde(skip)]
    cache: Option<(DMatrix<f64>, Vec<f64>)>,
    #[serde(skip)]
    grad_gamma: Option<DMatrix<f64>>,
    #[serde(skip)]
    grad_beta: Option<DMatrix<f64>>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: DMatrix::from_element(1, dim, 1.0),
            beta: DMatrix::zeros(1, dim),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
            grad_gamma: None,
            grad_beta: None,
        }
    }

    fn forward(&mut self, x: &DMatrix<f64>, mode: Mode) -> DMatrix<f64> {
        let n = x.nrows();
        let mut y = x.clone();
        match mode {
            Mode::Eval => {
                for (j, mut col) in y.column_iter_mut().enumerate() {
                    let inv = 1.0 / (self.running_var[j] + self.eps).sqrt();
                    let (g, b, m) = (self.gamma[(0, j)], self.beta[(0, j)], self.running_mean[j]);
                    col.apply(|v| *v = g * (*v - m) * inv + b);
                }
                y
            }
            Mode::Train => {
                let mut xhat = x.clone();
                let mut inv_std = Vec::with_capacity(x.ncols());
                for j in 0..x.ncols() {
                    let col = x.column(j);
                    let mean = col.sum() / n as f64;
                    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + self.eps).sqrt();
                    inv_std.push(inv);
                    let unbiased = if n > 1 { var * n as f64 / (n - 1) as f64 } else { var };
                    self.running_mean[j] = (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean;
                    self.running_var[j] = (1.0 - self.momentum) * self.running_var[j] + self.momentum * unbiased;
                    let (g, b) = (self.gamma[(0, j)], self.beta[(0, j)]);
                    for i in 0..n {
                        let h = (x[(i, j)] - mean) * inv;
                        xhat[(i, j)] = h;
                        y[(i, j)] = g * h + b;
                    }
                }
                self.cache = Some((xhat, inv_std));
                y
            }
        }
    }

    fn backward(&mut self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let (xhat, inv_std) = self.cache.as_ref().expect("forward before backward");
        let n = g.nrows() as f64;
        let mut dx = DMatrix::zeros(g.nrows(), g.ncols());
        let mut dgamma = DMatrix::zeros(1, g.ncols());
        let mut dbeta = DMatrix::zeros(1, g.ncols());
        for j in 0..g.ncols() {
            let gamma = self.gamma[(0, j)];
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for i in 0..g.nrows() {
                let d = g[(i, j)];
                dgamma[(0, j)] += d * xhat[(i, j)];
                dbeta[(0, j)] += d;
                sum_d += d * gamma;
                sum_dx += d * gamma * xhat[(i, j)];
            }
            for i in 0..g.nrows() {
                let dh = g[(i, j)] * gamma;
                dx[(i, j)] = inv_std[j] / n * (n * dh - sum_d - xhat[(i, j)] * sum_dx);
            }
        }
        self.grad_gamma = Some(dgamma);
        self.grad_beta = Some(dbeta);
        dx
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Layer {
    Dense(Dense),
    Relu,
    BatchNorm(BatchNorm),
    Dropout(f64),
}

/// A stack of layers plus the per-layer caches needed for one backward pass.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
    #[serde(skip)]
    masks: Vec<Option<DMatrix<f64>>>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        let masks = vec![None; layers.len()];
        Self { layers, masks }
    }

    /// `input → [Dense → (BatchNorm) → ReLU → (Dropout)]* → Dense(output)`.
    pub fn mlp<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        batch_norm: bool,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::new();
        let mut fan_in = input;
        for &h in hidden {
            layers.push(Layer::Dense(Dense::he_uniform(fan_in, h, rng)));
            if batch_norm {
                layers.push(Layer::BatchNorm(BatchNorm::new(h)));
            }
            layers.push(Layer::Relu);
            if dropout > 0.0 {
                layers.push(Layer::Dropout(dropout));
            }
            fan_in = h;
        }
        layers.push(Layer::Dense(Dense::he_uniform(fan_in, output, rng)));
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Forward pass without touching caches or running statistics.
    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense(d) => d.apply(&h),
                Layer::Relu => h.map(|v| v.max(0.0)),
                Layer::BatchNorm(bn) => {
                    let mut bn = bn.clone();
                    bn.forward(&h, Mode::Eval)
                }
                Layer::Dropout(_) => h,
            };
        }
        h
    }

    /// Training-mode forward pass that records what `backward` needs.
    pub fn forward_train<R: Rng + ?Sized>(&mut self, x: &DMatrix<f64>, rng: &mut R) -> DMatrix<f64> {
        let mut h = x.clone();
        for (k, layer) in self.layers.iter_mut().enumerate() {
            h = match layer {
                Layer::Dense(d) => {
                    let y = d.apply(&h);
                    d.input = Some(h);
                    y
                }
                Layer::Relu => {
                    let mask = h.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    let y = h.component_mul(&mask);
                    self.masks[k] = Some(mask);
                    y
                }
                Layer::BatchNorm(bn) => bn.forward(&h, Mode::Train),
                Layer::Dropout(p) => {
                    let keep = 1.0 - *p;
                    let mask = h.map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                    let y = h.component_mul(&mask);
                    self.masks[k] = Some(mask);
                    y
                }
            };
        }
        h
    }

    /// Backpropagate `dL/d(output)`; parameter gradients are stored on the
    /// layers and `dL/d(input)` is returned.
    pub fn backward(&mut self, grad: &DMatrix<f64>) -> DMatrix<f64> {
        let mut g = grad.clone();
        for (k, layer) in self.layers.iter_mut().enumerate().rev() {
            g = match layer {
                Layer::Dense(d) => d.backward(&g),
                Layer::Relu | Layer::Dropout(_) => {
                    g.component_mul(self.masks[k].as_ref().expect("forward before backward"))
                }
                Layer::BatchNorm(bn) => bn.backward(&g),
            };
        }
        g
    }

    pub fn params(&self) -> Vec<&DMatrix<f64>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(&d.w);
                    out.push(&d.b);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&bn.gamma);
                    out.push(&bn.beta);
                }
                _ => {}
            }
        }
        out
    }

    fn params_and_grads(&mut self) -> Vec<(&mut DMatrix<f64>, &DMatrix<f64>)> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    let gw = d.grad_w.as_ref().expect("backward before step");
                    let gb = d.grad_b.as_ref().expect("backward before step");
                    out.push((&mut d.w, gw));
                    out.push((&mut d.b, gb));
                }
                Layer::BatchNorm(bn) => {
                    let gg = bn.grad_gamma.as_ref().expect("backward before step");
                    let gb = bn.grad_beta.as_ref().expect("backward before step");
                    out.push((&mut bn.gamma, gg));
                    out.push((&mut bn.beta, gb));
                }
                _ => {}
            }
        }
        out
    }

    /// Stored parameter gradients, flattened in `params()` order.
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.extend(d.grad_w.as_ref().expect("backward first").iter());
                    out.extend(d.grad_b.as_ref().expect("backward first").iter());
                }
                Layer::BatchNorm(bn) => {
                    out.extend(bn.grad_gamma.as_ref().expect("backward first").iter());
                    out.extend(bn.grad_beta.as_ref().expect("backward first").iter());
                }
                _ => {}
            }
        }
        out
    }

    /// Parameters as a flat array plus a `(rows, cols)` shape header.
    pub fn to_flat(&self) -> FlatParams {
        let params = self.params();
        FlatParams {
            shapes: params.iter().map(|p| (p.nrows(), p.ncols())).collect(),
            values: params.iter().flat_map(|p| p.iter().copied()).collect(),
        }
    }

    /// Overwrite parameters from a flat array produced by `to_flat` on a
    /// network of the same architecture.
    pub fn load_flat(&mut self, flat: &FlatParams) -> Result<()> {
        let shapes: Vec<(usize, usize)> = self.params().iter().map(|p| (p.nrows(), p.ncols())).collect();
        if shapes != flat.shapes || flat.values.len() != shapes.iter().map(|(r, c)| r * c).sum::<usize>() {
            return Err(Error::InvalidArgument("parameter shapes do not match the network".into()));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let targets: Vec<&mut DMatrix<f64>> = match layer {
                Layer::Dense(d) => vec![&mut d.w, &mut d.b],
                Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
                _ => vec![],
            };
            for t in targets {
                let len = t.len();
                t.copy_from_slice(&flat.values[offset..offset + len]);
                offset += len;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatParams {
    pub shapes: Vec<(usize, usize)>,
    pub values: Vec<f64>,
}

/// Adam with optional L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut Network) {
        let pairs = net.params_and_grads();
        if self.m.is_empty() {
            self.m = pairs.iter().map(|(p, _)| DMatrix::zeros(p.nrows(), p.ncols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in pairs.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for idx in 0..p.len() {
                let grad = g[idx] + self.weight_decay * p[idx];
                m[idx] = self.beta1 * m[idx] + (1.0 - self.beta1) * grad;
                v[idx] = self.beta2 * v[idx] + (1.0 - self.beta2) * grad * grad;
                let mhat = m[idx] / c1;
                let vhat = v[idx] / c2;
                p[idx] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Mean squared error and its gradient with respect to the predictions.
pub fn mse_loss(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let n = pred.len() as f64;
    let diff = pred - target;
    let loss = diff.norm_squared() / n;
    (loss, diff * (2.0 / n))
}
