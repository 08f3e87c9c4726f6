//! Exact GP regression with a `C · RBF` anisotropic kernel, used to spread
//! bias (or PEMSE) estimates from labelled points to the whole grid.
//!
//! Hyperparameters are fitted by maximising the log marginal likelihood with
//! projected Adam in log space, from the initial values plus a few random
//! restarts inside the bounds.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, JitterPolicy, SymMatrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectTarget {
    #[default]
    Bias,
    Pemse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DirectConfig {
    pub target: DirectTarget,
    pub constant_init: f64,
    pub constant_bounds: (f64, f64),
    pub length_scale_init: f64,
    pub length_scale_bounds: (f64, f64),
    /// Added to the kernel diagonal.
    pub alpha: f64,
    pub n_restarts: usize,
    pub optimizer_steps: usize,
    pub optimizer_lr: f64,
    pub overwrite_observed: bool,
}

impl Default for DirectConfig {
    fn default() -> Self {
        Self {
            target: DirectTarget::Bias,
            constant_init: 1.0,
            constant_bounds: (1e-3, 1e3),
            length_scale_init: 1.0,
            length_scale_bounds: (1e-2, 1e2),
            alpha: 1e-6,
            n_restarts: 3,
            optimizer_steps: 150,
            optimizer_lr: 0.05,
            overwrite_observed: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GpRegressor {
    x_train: DMatrix<f64>,
    weights: DVector<f64>,
    /// `[ln C, ln l₁, …, ln l_d]`.
    pub log_params: Vec<f64>,
    pub log_marginal_likelihood: f64,
    y_mean: f64,
    y_std: f64,
    constant: Option<f64>,
}

struct Problem<'a> {
    sq_diffs: Vec<DMatrix<f64>>,
    y: &'a DVector<f64>,
    alpha: f64,
}

impl Problem<'_> {
    fn kernel(&self, log_params: &[f64]) -> DMatrix<f64> {
        let c = log_params[0].exp();
        let n = self.y.len();
        let mut e: DMatrix<f64> = DMatrix::zeros(n, n);
        for (d, sq) in self.sq_diffs.iter().enumerate() {
            let inv = (-2.0 * log_params[d + 1]).exp();
            e.zip_apply(sq, |acc, s| *acc += s * inv);
        }
        e.map(|v: f64| c * (-0.5 * v).exp())
    }

    /// Log marginal likelihood and its gradient in log-parameter space.
    fn evaluate(&self, log_params: &[f64]) -> Option<(f64, Vec<f64>)> {
        let n = self.y.len();
        let kf = self.kernel(log_params);
        let mut k = kf.clone();
        for i in 0..n {
            k[(i, i)] += self.alpha;
        }
        let chol = cholesky(&SymMatrix::new(k).ok()?, JitterPolicy::default()).ok()?;
        let w = chol.solve(self.y);
        let lml = -0.5 * self.y.dot(&w) - 0.5 * chol.log_det() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        let inner = &w * w.transpose() - chol.inverse();
        let wk = inner.component_mul(&kf);
        let mut grad = vec![0.5 * wk.sum()];
        for (d, sq) in self.sq_diffs.iter().enumerate() {
            let inv = (-2.0 * log_params[d + 1]).exp();
            grad.push(0.5 * wk.component_mul(sq).sum() * inv);
        }
        lml.is_finite().then_some((lml, grad))
    }
}

fn sq_diffs(x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    (0..x.ncols())
        .map(|d| DMatrix::from_fn(x.nrows(), x.nrows(), |i, j| (x[(i, d)] - x[(j, d)]).powi(2)))
        .collect()
}

impl GpRegressor {
    pub fn fit<R: Rng + ?Sized>(x: &DMatrix<f64>, y: &[f64], config: &DirectConfig, rng: &mut R) -> Result<Self> {
        let n = y.len();
        if n < 2 || x.nrows() != n {
            return Err(Error::InvalidState(format!(
                "GP needs at least 2 aligned training rows, got {n} targets and {} inputs",
                x.nrows()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("GP training data must be finite".into()));
        }
        let d = x.ncols();
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let y_std = (y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let init: Vec<f64> = std::iter::once(config.constant_init.ln())
            .chain(std::iter::repeat_n(config.length_scale_init.ln(), d))
            .collect();
        if y_std < 1e-12 {
            return Ok(Self {
                x_train: x.clone(),
                weights: DVector::zeros(n),
                log_params: init,
                log_marginal_likelihood: f64::NAN,
                y_mean,
                y_std: 1.0,
                constant: Some(y_mean),
            });
        }
        let ys = DVector::from_iterator(n, y.iter().map(|v| (v - y_mean) / y_std));
        let problem = Problem {
            sq_diffs: sq_diffs(x),
            y: &ys,
            alpha: config.alpha,
        };
        let lo: Vec<f64> = std::iter::once(config.constant_bounds.0.ln())
            .chain(std::iter::repeat_n(config.length_scale_bounds.0.ln(), d))
            .collect();
        let hi: Vec<f64> = std::iter::once(config.constant_bounds.1.ln())
            .chain(std::iter::repeat_n(config.length_scale_bounds.1.ln(), d))
            .collect();

        let mut starts = vec![init];
        for _ in 0..config.n_restarts {
            starts.push((0..=d).map(|p| rng.random_range(lo[p]..=hi[p])).collect());
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for start in starts {
            if let Some((lml, theta)) = maximize(&problem, start, &lo, &hi, config) {
                if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                    best = Some((lml, theta));
                }
            }
        }
        let (lml, log_params) =
            best.ok_or_else(|| Error::Numerical("GP marginal likelihood was not finite at any start".into()))?;
        let mut k = problem.kernel(&log_params);
        for i in 0..n {
            k[(i, i)] += config.alpha;
        }
        let chol = cholesky(&SymMatrix::new(k)?, JitterPolicy::default())?;
        Ok(Self {
            x_train: x.clone(),
            weights: chol.solve(&ys),
            log_params,
            log_marginal_likelihood: lml,
            y_mean,
            y_std,
            constant: None,
        })
    }

    /// Posterior mean at each row of `x`.
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        if let Some(c) = self.constant {
            return vec![c; x.nrows()];
        }
        let c = self.log_params[0].exp();
        let inv: Vec<f64> = self.log_params[1..].iter().map(|l| (-2.0 * l).exp()).collect();
        (0..x.nrows())
            .map(|q| {
                let mut s = 0.0;
                for t in 0..self.x_train.nrows() {
                    let mut e = 0.0;
                    for (d, w) in inv.iter().enumerate() {
                        e += (x[(q, d)] - self.x_train[(t, d)]).powi(2) * w;
                    }
                    s += c * (-0.5 * e).exp() * self.weights[t];
                }
                s * self.y_std + self.y_mean
            })
            .collect()
    }

    pub fn is_constant(&self) -> bool {
        self.constant.is_some()
    }
}

fn maximize(
    problem: &Problem<'_>,
    mut theta: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    config: &DirectConfig,
) -> Option<(f64, Vec<f64>)> {
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let p = theta.len();
    let (mut m, mut v) = (vec![0.0; p], vec![0.0; p]);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for t in 1..=config.optimizer_steps.max(1) {
        let Some((lml, grad)) = problem.evaluate(&theta) else {
            break;
        };
        if best.as_ref().is_none_or(|(b, _)| lml > *b) {
            best = Some((lml, theta.clone()));
        }
        if grad.iter().map(|g| g * g).sum::<f64>().sqrt() < 1e-6 {
            break;
        }
        for k in 0..p {
            m[k] = b1 * m[k] + (1.0 - b1) * grad[k];
            v[k] = b2 * v[k] + (1.0 - b2) * grad[k] * grad[k];
            let mh = m[k] / (1.0 - b1.powi(t as i32));
            let vh = v[k] / (1.0 - b2.powi(t as i32));
            theta[k] = (theta[k] + config.optimizer_lr * mh / (vh.sqrt() + eps)).clamp(lo[k], hi[k]);
        }
    }
    if let Some((lml, _)) = problem.evaluate(&theta) {
        if best.as_ref().is_none_or(|(b, _)| lml > *b) {
            best = Some((lml, theta));
        }
    }
    best
}
