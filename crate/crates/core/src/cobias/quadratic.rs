//! Completion of the cobias matrix with a Gram-form model
//! `Q(x, x*) = ψ(x)ᵀ ψ(x*)`.
//!
//! `ψ` is trained on the lower triangle (diagonal included) of the observed
//! block `δ̂ᵢ δ̂_j`. Targets are divided by their RMS but not centred: a shift
//! would break the Gram form, which is what keeps predictions symmetric and
//! PSD.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{psd_project, top_eigenpair_psd, SymMatrix};
use crate::nn::{Adam, Network};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadraticConfig {
    pub hidden_sizes: Vec<usize>,
    pub embedding_dim: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub validation_fraction: f64,
    pub overwrite_observed: bool,
}

impl Default for QuadraticConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![64, 64, 32],
            embedding_dim: 16,
            dropout: 0.1,
            batch_norm: true,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-5,
            patience: 200,
            max_epochs: 2000,
            validation_fraction: 0.15,
            overwrite_observed: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QuadraticEstimator {
    net: Network,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
    target_scale: f64,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
}

#[derive(Clone, Copy)]
struct Pair {
    a: usize,
    b: usize,
    target: f64,
}

fn pair_loss(psi: &DMatrix<f64>, pairs: &[Pair]) -> f64 {
    pairs
        .iter()
        .map(|p| (psi.row(p.a).dot(&psi.row(p.b)) - p.target).powi(2))
        .sum::<f64>()
        / pairs.len() as f64
}

impl QuadraticEstimator {
    /// Fit on the observed block. `features` has one row per grid point;
    /// `observed` lists distinct grid indices with biases `d_hat`.
    pub fn fit<R: Rng + ?Sized>(
        features: &DMatrix<f64>,
        observed: &[usize],
        d_hat: &[f64],
        config: &QuadraticConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let l = observed.len();
        if l != d_hat.len() {
            return Err(Error::InvalidArgument("observed indices and biases differ in length".into()));
        }
        let mut distinct = observed.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() != l || l < 2 {
            return Err(Error::InvalidState(format!(
                "quadratic estimator needs at least 2 distinct observed indices, got {}",
                distinct.len()
            )));
        }
        if observed.iter().any(|&i| i >= features.nrows()) || d_hat.iter().any(|d| !d.is_finite()) {
            return Err(Error::InvalidArgument("observed data out of range or not finite".into()));
        }

        let d = features.ncols();
        let n = features.nrows() as f64;
        let mut feature_mean = vec![0.0; d];
        let mut feature_std = vec![1.0; d];
        for c in 0..d {
            let col = features.column(c);
            let m = col.sum() / n;
            let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            feature_mean[c] = m;
            feature_std[c] = if s > 1e-12 { s } else { 1.0 };
        }
        let mut est = Self {
            net: Network::mlp(d, &config.hidden_sizes, config.embedding_dim, config.batch_norm, config.dropout, rng),
            feature_mean,
            feature_std,
            target_scale: 1.0,
            train_losses: Vec::new(),
            val_losses: Vec::new(),
            best_epoch: 0,
        };
        let x = est.standardize(&features.select_rows(observed.iter()));

        let mut pairs: Vec<Pair> = Vec::with_capacity(l * (l + 1) / 2);
        for a in 0..l {
            for b in 0..=a {
                pairs.push(Pair {
                    a,
                    b,
                    target: d_hat[a] * d_hat[b],
                });
            }
        }
        pairs.shuffle(rng);
        let n_val = (pairs.len() as f64 * config.validation_fraction).round() as usize;
        let n_val = n_val.min(pairs.len() - 1);
        let (val, train) = pairs.split_at_mut(n_val);
        let rms = (train.iter().map(|p| p.target * p.target).sum::<f64>() / train.len() as f64).sqrt();
        est.target_scale = if rms > 1e-12 { rms } else { 1.0 };
        for p in train.iter_mut().chain(val.iter_mut()) {
            p.target /= est.target_scale;
        }

        let mut opt = Adam::new(config.learning_rate, config.beta1, config.beta2, config.weight_decay);
        let mut best = (f64::INFINITY, est.net.clone(), 0);
        let mut stale = 0;
        let scale = 2.0 / train.len() as f64;
        for epoch in 0..config.max_epochs {
            let psi = est.net.forward_train(&x, rng);
            let mut m = DMatrix::zeros(l, l);
            let mut loss = 0.0;
            for p in train.iter() {
                let r = psi.row(p.a).dot(&psi.row(p.b)) - p.target;
                loss += r * r;
                if p.a == p.b {
                    m[(p.a, p.a)] += 2.0 * r;
                } else {
                    m[(p.a, p.b)] += r;
                    m[(p.b, p.a)] += r;
                }
            }
            est.train_losses.push(loss / train.len() as f64);
            est.net.backward(&(m * &psi * scale));
            opt.step(&mut est.net);

            let monitor = if val.is_empty() { &*train } else { &*val };
            let v = pair_loss(&est.net.predict(&x), monitor);
            est.val_losses.push(v);
            if v < best.0 {
                best = (v, est.net.clone(), epoch);
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
        }
        est.net = best.1;
        est.best_epoch = best.2;
        Ok(est)
    }

    fn standardize(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, c| {
            (x[(i, c)] - self.feature_mean[c]) / self.feature_std[c]
        })
    }

    /// Rows `e(x)` with `Q(x, x*) = e(x)·e(x*)`.
    pub fn embed(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        self.net.predict(&self.standardize(features)) * self.target_scale.sqrt()
    }

    /// `Q(a, b)` for two raw feature vectors, each embedded on its own.
    pub fn q(&self, a: &[f64], b: &[f64]) -> f64 {
        let ea = self.embed(&DMatrix::from_row_slice(1, a.len(), a));
        let eb = self.embed(&DMatrix::from_row_slice(1, b.len(), b));
        ea.row(0).iter().zip(eb.row(0).iter()).map(|(x, y)| x * y).sum()
    }

    /// The raw Gram matrix over every row of `features`.
    pub fn predict_gram(&self, features: &DMatrix<f64>) -> SymMatrix {
        let e = self.embed(features);
        let k = e.ncols();
        SymMatrix::from_lower_fn(e.nrows(), |i, j| (0..k).map(|c| e[(i, c)] * e[(j, c)]).sum())
    }

    /// Completed `Δ*` over the grid: Gram prediction, observed block
    /// overwritten by `δ̂ᵢ δ̂_j` when configured, then PSD-projected.
    pub fn predict_delta(&self, features: &DMatrix<f64>, observed: &[usize], d_hat: &[f64]) -> Result<SymMatrix> {
        self.predict_delta_with(features, observed, d_hat, true)
    }

    pub fn predict_delta_with(
        &self,
        features: &DMatrix<f64>,
        observed: &[usize],
        d_hat: &[f64],
        overwrite_observed: bool,
    ) -> Result<SymMatrix> {
        let mut q = self.predict_gram(features);
        if overwrite_observed {
            for (a, &i) in observed.iter().enumerate() {
                for (b, &j) in observed.iter().enumerate().take(a + 1) {
                    q.set(i, j, d_hat[a] * d_hat[b]);
                }
            }
            psd_project(&q)
        } else {
            Ok(q)
        }
    }

    /// Signed bias from `Δ*`: magnitudes `√diag`, signs from the leading
    /// eigenvector, global sign chosen to agree with `δ̂` on the observed
    /// indices.
    pub fn signed_delta(&self, delta_mat: &SymMatrix, observed: &[usize], d_hat: &[f64]) -> Vec<f64> {
        signed_delta(delta_mat, observed, d_hat)
    }
}

pub fn signed_delta(delta_mat: &SymMatrix, observed: &[usize], d_hat: &[f64]) -> Vec<f64> {
    let (_, v) = top_eigenpair_psd(delta_mat, 1000, 1e-12);
    let sign = |x: f64| if x < 0.0 { -1.0 } else { 1.0 };
    let agree: i64 = observed
        .iter()
        .zip(d_hat)
        .filter(|(_, d)| **d != 0.0)
        .map(|(&i, &d)| if sign(v[i]) == sign(d) { 1 } else { -1 })
        .sum();
    let global = if agree < 0 { -1.0 } else { 1.0 };
    delta_mat
        .diagonal()
        .iter()
        .zip(&v)
        .map(|(m, vi)| global * sign(*vi) * m.max(0.0).sqrt())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigen;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_features(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, 4, |i, c| ((i * 4 + c) as f64 * 0.61).sin())
    }

    fn small_config() -> QuadraticConfig {
        QuadraticConfig {
            max_epochs: 300,
            patience: 50,
            ..QuadraticConfig::default()
        }
    }

    #[test]
    fn needs_two_distinct_indices() {
        let f = toy_features(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = small_config();
        assert!(matches!(
            QuadraticEstimator::fit(&f, &[1], &[0.2], &c, &mut rng),
            Err(Error::InvalidState(_))
        ));
        assert!(matches!(
            QuadraticEstimator::fit(&f, &[1, 1], &[0.2, 0.2], &c, &mut rng),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn gram_predictions_are_symmetric_and_psd() {
        let f = toy_features(30);
        let obs: Vec<usize> = (0..12).collect();
        let d: Vec<f64> = obs.iter().map(|&i| (i as f64 * 0.4).cos()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est = QuadraticEstimator::fit(&f, &obs, &d, &small_config(), &mut rng).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                let a: Vec<f64> = f.row(i).iter().copied().collect();
                let b: Vec<f64> = f.row(j).iter().copied().collect();
                assert_eq!(est.q(&a, &b), est.q(&b, &a));
            }
        }
        let g = est.predict_gram(&f);
        let eig = sym_eigen(&g).unwrap();
        assert!(*eig.values.last().unwrap() >= -1e-6 * eig.scale().max(1e-300));
    }

    #[test]
    fn observed_block_is_kept() {
        let f = toy_features(20);
        let obs = vec![3, 7, 11];
        let d = vec![0.5, -0.2, 0.1];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est = QuadraticEstimator::fit(&f, &obs, &d, &small_config(), &mut rng).unwrap();
        let raw = est.predict_delta_with(&f, &obs, &d, false).unwrap();
        let mut overwritten = raw.clone();
        for (a, &i) in obs.iter().enumerate() {
            for (b, &j) in obs.iter().enumerate() {
                overwritten.set(i, j, d[a] * d[b]);
            }
        }
        let projected = est.predict_delta(&f, &obs, &d).unwrap();
        assert!(projected.diagonal().iter().all(|&v| v >= -1e-6));
        assert_eq!(projected, psd_project(&overwritten).unwrap());
    }

    #[test]
    fn training_reduces_loss() {
        let f = toy_features(40);
        let obs: Vec<usize> = (0..20).collect();
        let d: Vec<f64> = obs.iter().map(|&i| f[(i, 0)] + 0.5 * f[(i, 1)]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let est = QuadraticEstimator::fit(&f, &obs, &d, &small_config(), &mut rng).unwrap();
        let first = est.val_losses[0];
        let best = est.val_losses[est.best_epoch];
        assert!(best < first, "{best} !< {first}");
    }

    #[test]
    fn signs_follow_the_leading_eigenvector() {
        let delta = [0.3, -0.5, 0.0, 0.8];
        let m = SymMatrix::outer(&delta);
        let got = signed_delta(&m, &[0, 1], &[0.3, -0.5]);
        for (g, d) in got.iter().zip(delta) {
            assert!((g - d).abs() < 1e-9, "{got:?}");
        }
        // empirical signs flipped globally → result flipped too
        let flipped = signed_delta(&m, &[0, 1], &[-0.3, 0.5]);
        for (g, d) in flipped.iter().zip(delta) {
            assert!((g + d).abs() < 1e-9);
        }
    }
}
