//! Deep ensemble over the labelled pool.
//!
//! Each member is an MLP trained full-batch with Adam on its own bag of the
//! observation rows. Bags are complementary folds: the rows are shuffled into
//! `1 / (1 - bag_fraction)` folds and member `j` holds out fold `j`.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{mse_loss, Adam, FlatParams, Network};
use crate::pool::{LabeledPool, StateGrid};
use crate::rng::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_members: usize,
    pub hidden_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub bag_fraction: f64,
    /// Rows per Adam step; 0 means full batch.
    pub batch_size: usize,
    pub min_improvement: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub rng_seed: u64,
    /// Train members on the rayon pool. Results do not depend on it.
    pub parallel: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_members: 5,
            hidden_sizes: vec![32, 32, 16],
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            bag_fraction: 0.8,
            batch_size: 32,
            min_improvement: 1e-4,
            patience: 10,
            max_epochs: 500,
            rng_seed: 0,
            parallel: true,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_members < 2 {
            return Err(Error::InvalidArgument(format!(
                "an ensemble needs at least 2 members, got {}",
                self.n_members
            )));
        }
        if !(self.bag_fraction > 0.0 && self.bag_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "bag_fraction must be in (0, 1], got {}",
                self.bag_fraction
            )));
        }
        if self.hidden_sizes.contains(&0) || self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("hidden sizes and learning rate must be positive".into()));
        }
        Ok(())
    }

    fn n_folds(&self) -> usize {
        if self.bag_fraction >= 1.0 {
            1
        } else {
            (1.0 / (1.0 - self.bag_fraction)).round().max(2.0) as usize
        }
    }
}

/// Loss curve of one member, with the epochs at which the early-stopping
/// counter reset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub losses: Vec<f64>,
    pub reset_epochs: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub members: Vec<Network>,
    pub input_mean: [f64; 2],
    pub input_std: [f64; 2],
    pub training_round: u32,
    pub traces: Vec<TrainingTrace>,
}

/// Ensemble outputs over a set of points.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSummary {
    pub mean: Vec<f64>,
    /// Sample variance over members, divisor `K − 1`.
    pub variance: Vec<f64>,
    /// `K × n`, row `k` holds member `k`.
    pub member_matrix: DMatrix<f64>,
}

impl PredictiveSummary {
    pub fn from_member_matrix(member_matrix: DMatrix<f64>) -> Result<Self> {
        let k = member_matrix.nrows();
        if k < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 members, got {k}")));
        }
        let n = member_matrix.ncols();
        let mut mean = Vec::with_capacity(n);
        let mut variance = Vec::with_capacity(n);
        for col in member_matrix.column_iter() {
            let m = col.sum() / k as f64;
            let v = col.iter().map(|f| (f - m).powi(2)).sum::<f64>() / (k - 1) as f64;
            mean.push(m);
            variance.push(v);
        }
        Ok(Self {
            mean,
            variance,
            member_matrix,
        })
    }

    pub fn n_members(&self) -> usize {
        self.member_matrix.nrows()
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

fn standardize(x: &mut DMatrix<f64>, mean: [f64; 2], std: [f64; 2]) {
    for j in 0..2 {
        x.column_mut(j).apply(|v| *v = (*v - mean[j]) / std[j]);
    }
}

fn train_member(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    config: &EnsembleConfig,
    seed: u64,
) -> (Network, TrainingTrace) {
    let mut rng = rand::SeedableRng::seed_from_u64(seed);
    let rng: &mut rng::StreamRng = &mut rng;
    let mut net = Network::mlp(2, &config.hidden_sizes, 1, false, 0.0, rng);
    let mut opt = Adam::new(config.learning_rate, config.beta1, config.beta2, 0.0);
    let mut trace = TrainingTrace::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let n = x.nrows();
    // near-equal batches so no trailing batch of a single row
    let n_batches = if config.batch_size == 0 { 1 } else { n.div_ceil(config.batch_size) };
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.max_epochs {
        // epoch loss is the row-weighted mean of the pre-step batch losses
        order.shuffle(rng);
        let mut loss = 0.0;
        for b in 0..n_batches {
            let chunk = &order[b * n / n_batches..(b + 1) * n / n_batches];
            let (xb, yb) = if chunk.len() == n {
                (x.clone(), y.clone())
            } else {
                (x.select_rows(chunk.iter()), y.select_rows(chunk.iter()))
            };
            let pred = net.forward_train(&xb, rng);
            let (l, grad) = mse_loss(&pred, &yb);
            loss += l * chunk.len() as f64 / n as f64;
            net.backward(&grad);
            opt.step(&mut net);
        }
        trace.losses.push(loss);
        if loss > best - config.min_improvement {
            stale += 1;
        } else {
            stale = 0;
            trace.reset_epochs.push(epoch);
        }
        best = best.min(loss);
        if stale > config.patience {
            break;
        }
    }
    (net, trace)
}

/// Fit the ensemble on every realisation in `pool`.
pub fn fit(pool: &LabeledPool, grid: &StateGrid, config: &EnsembleConfig) -> Result<EnsembleModel> {
    config.validate()?;
    let rows = pool.training_rows();
    if rows.len() < 2 {
        return Err(Error::InvalidState(format!(
            "ensemble needs at least 2 observations, pool has {}",
            rows.len()
        )));
    }
    let n = rows.len();
    let mut x = DMatrix::zeros(n, 2);
    let mut y = DMatrix::zeros(n, 1);
    for (r, &(i, v)) in rows.iter().enumerate() {
        let p = grid.point(i)?;
        x[(r, 0)] = p[0];
        x[(r, 1)] = p[1];
        y[(r, 0)] = v;
    }
    let mut input_mean = [0.0; 2];
    let mut input_std = [1.0; 2];
    for j in 0..2 {
        let col = x.column(j);
        let m = col.sum() / n as f64;
        let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        input_mean[j] = m;
        input_std[j] = if s > 1e-12 { s } else { 1.0 };
    }
    standardize(&mut x, input_mean, input_std);

    let round = pool.round() as u64;
    let n_folds = config.n_folds();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(config.rng_seed, Stream::Member, round, u64::MAX));
    let mut fold = vec![0usize; n];
    for (pos, &r) in order.iter().enumerate() {
        fold[r] = pos % n_folds;
    }

    let bags: Vec<Vec<usize>> = (0..config.n_members)
        .map(|j| {
            let held_out = j % n_folds;
            let bag: Vec<usize> = (0..n).filter(|&r| n_folds == 1 || fold[r] != held_out).collect();
            if bag.is_empty() {
                (0..n).collect()
            } else {
                bag
            }
        })
        .collect();

    let train = |j: usize| {
        let bag = &bags[j];
        let xb = x.select_rows(bag.iter());
        let yb = y.select_rows(bag.iter());
        let seed = rng::derive_seed(config.rng_seed, Stream::Member, round, j as u64);
        train_member(&xb, &yb, config, seed)
    };
    let trained: Vec<(Network, TrainingTrace)> = if config.parallel {
        (0..config.n_members).into_par_iter().map(train).collect()
    } else {
        (0..config.n_members).map(train).collect()
    };
    let (members, traces) = trained.into_iter().unzip();
    Ok(EnsembleModel {
        members,
        input_mean,
        input_std,
        training_round: pool.round(),
        traces,
    })
}

impl EnsembleModel {
    /// Member predictions at arbitrary points.
    pub fn predict_points(&self, points: &[[f64; 2]]) -> Result<PredictiveSummary> {
        let mut x = DMatrix::from_fn(points.len(), 2, |i, j| points[i][j]);
        standardize(&mut x, self.input_mean, self.input_std);
        let mut m = DMatrix::zeros(self.members.len(), points.len());
        for (k, net) in self.members.iter().enumerate() {
            let out = net.predict(&x);
            for i in 0..points.len() {
                m[(k, i)] = out[(i, 0)];
            }
        }
        PredictiveSummary::from_member_matrix(m)
    }

    pub fn member_params(&self) -> Vec<FlatParams> {
        self.members.iter().map(Network::to_flat).collect()
    }
}

pub fn predict(model: &EnsembleModel, grid: &StateGrid) -> Result<PredictiveSummary> {
    model.predict_points(grid.points())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{NoisyDraw, ProblemType};
    use approx::assert_abs_diff_eq;

    fn pool_with(grid: &StateGrid, idx: &[usize], values: &[f64]) -> LabeledPool {
        let mut pool = LabeledPool::empty(grid.len(), ProblemType::TypeII);
        let draw = NoisyDraw {
            point_indices: idx.to_vec(),
            values: values.to_vec(),
            round_tag: 1,
        };
        pool.commit_queries(idx, &draw).unwrap();
        pool
    }

    #[test]
    fn summary_statistics() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 4.0, 2.0, 4.0, 3.0, 4.0]);
        let s = PredictiveSummary::from_member_matrix(m).unwrap();
        assert_eq!(s.mean, vec![2.0, 4.0]);
        assert_eq!(s.variance, vec![1.0, 0.0]);

        let perm = DMatrix::from_row_slice(3, 1, &[3.0, 1.0, 2.0]);
        assert_eq!(PredictiveSummary::from_member_matrix(perm).unwrap().variance, vec![1.0]);
        assert!(PredictiveSummary::from_member_matrix(DMatrix::zeros(1, 4)).is_err());
    }

    #[test]
    fn constant_targets_give_constant_mean() {
        let grid = StateGrid::new(10).unwrap();
        let idx: Vec<usize> = (0..100).step_by(3).collect();
        let pool = pool_with(&grid, &idx, &vec![0.7; idx.len()]);
        let config = EnsembleConfig {
            rng_seed: 3,
            min_improvement: 0.0,
            max_epochs: 2000,
            bag_fraction: 1.0,
            ..EnsembleConfig::default()
        };
        let model = fit(&pool, &grid, &config).unwrap();
        let s = predict(&model, &grid).unwrap();
        let worst = idx.iter().map(|&i| (s.mean[i] - 0.7).abs()).fold(0.0, f64::max);
        assert!(worst < 0.05, "max deviation at observed points {worst}");
        let avg = s.mean.iter().map(|m| (m - 0.7).abs()).sum::<f64>() / s.len() as f64;
        assert!(avg < 0.05, "mean deviation {avg}");
        assert!(s.variance.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn too_few_observations() {
        let grid = StateGrid::new(4).unwrap();
        let pool = pool_with(&grid, &[3], &[0.1]);
        assert!(matches!(
            fit(&pool, &grid, &EnsembleConfig::default()),
            Err(Error::InvalidState(_))
        ));
        let empty = LabeledPool::empty(grid.len(), ProblemType::TypeI);
        assert!(fit(&empty, &grid, &EnsembleConfig::default()).is_err());
    }

    #[test]
    fn fits_are_bitwise_reproducible() {
        let grid = StateGrid::new(6).unwrap();
        let idx: Vec<usize> = (0..36).step_by(3).collect();
        let vals: Vec<f64> = idx.iter().map(|&i| (i as f64 * 0.3).sin()).collect();
        let pool = pool_with(&grid, &idx, &vals);
        let config = EnsembleConfig {
            rng_seed: 9,
            max_epochs: 50,
            ..EnsembleConfig::default()
        };
        let a = fit(&pool, &grid, &config).unwrap();
        let serial = EnsembleConfig {
            parallel: false,
            ..config.clone()
        };
        let b = fit(&pool, &grid, &serial).unwrap();
        assert_eq!(a.member_params(), b.member_params());
        let other = EnsembleConfig {
            rng_seed: 10,
            ..config
        };
        assert_ne!(a.member_params(), fit(&pool, &grid, &other).unwrap().member_params());
    }

    #[test]
    fn loss_drops_at_every_patience_reset() {
        let grid = StateGrid::new(8).unwrap();
        let idx: Vec<usize> = (0..64).step_by(2).collect();
        let vals: Vec<f64> = idx
            .iter()
            .map(|&i| crate::oracle::mean_signal(grid.point(i).unwrap()))
            .collect();
        let pool = pool_with(&grid, &idx, &vals);
        let model = fit(&pool, &grid, &EnsembleConfig::default()).unwrap();
        for trace in &model.traces {
            let at_resets: Vec<f64> = trace.reset_epochs.iter().map(|&e| trace.losses[e]).collect();
            assert!(at_resets.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn learns_a_linear_field() {
        let grid = StateGrid::new(10).unwrap();
        let idx: Vec<usize> = (0..100).step_by(2).collect();
        let vals: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let p = grid.point(i).unwrap();
                0.2 * p[0] - 0.5
            })
            .collect();
        let pool = pool_with(&grid, &idx, &vals);
        let config = EnsembleConfig {
            max_epochs: 3000,
            min_improvement: 0.0,
            patience: 200,
            rng_seed: 1,
            ..EnsembleConfig::default()
        };
        let model = fit(&pool, &grid, &config).unwrap();
        let pts: Vec<[f64; 2]> = idx.iter().map(|&i| grid.point(i).unwrap()).collect();
        let s = model.predict_points(&pts).unwrap();
        let mse = s.mean.iter().zip(&vals).map(|(m, v)| (m - v).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mse < 1e-3, "mse {mse}");
    }

    #[test]
    fn bags_hold_out_one_fold() {
        let c = EnsembleConfig::default();
        assert_eq!(c.n_folds(), 5);
        let full = EnsembleConfig {
            bag_fraction: 1.0,
            ..EnsembleConfig::default()
        };
        assert_eq!(full.n_folds(), 1);
        assert!(EnsembleConfig {
            n_members: 1,
            ..EnsembleConfig::default()
        }
        .validate()
        .is_err());
        assert_abs_diff_eq!(4.0 / 5.0, c.bag_fraction);
    }
}
