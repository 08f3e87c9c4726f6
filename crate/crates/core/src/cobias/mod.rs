//! Bias, PEMSE and the cobias–covariance matrix `Ω = Σ_F + Δ + Σ_Y`.
//!
//! Empirical quantities are computed from the labelled pool where data
//! exists; elsewhere one of three back ends fills them in: the oracle itself
//! ("cheating"), a GP regressor on the bias ([`gp`]), or a Gram-form network
//! that completes `Δ` directly ([`quadratic`]).

pub mod gp;
pub mod quadratic;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ensemble::PredictiveSummary;
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::oracle::{GridOracle, OracleSpec, ProblemType};
use crate::pool::{LabeledPool, Observation, StateGrid};
use crate::rng::{self, Stream};

pub use gp::{DirectConfig, DirectTarget, GpRegressor};
pub use quadratic::{QuadraticConfig, QuadraticEstimator};

/// Pointwise error decomposition over the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauVector {
    pub sigma_f2: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma_y2: Vec<f64>,
    /// `σ_F² + δ² + σ_Y²`.
    pub tau: Vec<f64>,
    /// `σ_F² + δ²`.
    pub reducible: Vec<f64>,
}

impl TauVector {
    pub fn from_components(sigma_f2: Vec<f64>, delta: Vec<f64>, sigma_y2: Vec<f64>) -> Result<Self> {
        let n = sigma_f2.len();
        if delta.len() != n || sigma_y2.len() != n {
            return Err(Error::InvalidArgument(format!(
                "component lengths differ: {n}, {}, {}",
                delta.len(),
                sigma_y2.len()
            )));
        }
        let reducible: Vec<f64> = sigma_f2.iter().zip(&delta).map(|(v, d)| v + d * d).collect();
        let tau = reducible.iter().zip(&sigma_y2).map(|(r, s)| r + s).collect();
        Ok(Self {
            sigma_f2,
            delta,
            sigma_y2,
            tau,
            reducible,
        })
    }

    /// A field known only as a total (no split into components).
    pub fn from_total(sigma_f2: Vec<f64>, total: Vec<f64>) -> Result<Self> {
        if total.len() != sigma_f2.len() {
            return Err(Error::InvalidArgument("length mismatch".into()));
        }
        let delta = sigma_f2
            .iter()
            .zip(&total)
            .map(|(v, t)| (t - v).max(0.0).sqrt())
            .collect();
        Ok(Self {
            sigma_y2: vec![0.0; total.len()],
            tau: total.clone(),
            reducible: total,
            sigma_f2,
            delta,
        })
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn bias_squared(&self) -> Vec<f64> {
        self.delta.iter().map(|d| d * d).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaDecomposition {
    pub sigma_f: SymMatrix,
    pub delta_vec: Option<Vec<f64>>,
    pub delta_mat: SymMatrix,
    pub sigma_y: SymMatrix,
    pub omega: SymMatrix,
    pub round: u32,
}

impl OmegaDecomposition {
    pub fn with_round(mut self, round: u32) -> Self {
        self.round = round;
        self
    }

    pub fn with_delta_vec(mut self, delta: Vec<f64>) -> Self {
        self.delta_vec = Some(delta);
        self
    }
}

pub fn assemble_omega(sigma_f: SymMatrix, delta_mat: SymMatrix, sigma_y: SymMatrix) -> Result<OmegaDecomposition> {
    let omega = sigma_f.add(&delta_mat)?.add(&sigma_y)?;
    Ok(OmegaDecomposition {
        sigma_f,
        delta_vec: None,
        delta_mat,
        sigma_y,
        omega,
        round: 0,
    })
}

/// Member sample covariance, divisor `K − 1`.
pub fn sigma_f_from_members(member_matrix: &DMatrix<f64>) -> Result<SymMatrix> {
    let k = member_matrix.nrows();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 members, got {k}")));
    }
    let mut centered = member_matrix.clone();
    for mut col in centered.column_iter_mut() {
        let m = col.sum() / k as f64;
        col.add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / (k - 1) as f64;
    Ok(SymMatrix::from_lower_fn(cov.nrows(), |i, j| cov[(i, j)]))
}

/// The true aleatoric covariance of the oracle over the grid.
pub fn sigma_y_known(spec: &OracleSpec, grid: &StateGrid) -> SymMatrix {
    let pts = grid.points();
    let stds: Vec<f64> = pts.iter().map(|&p| spec.noise_std(p)).collect();
    match spec.problem_type {
        ProblemType::TypeI => SymMatrix::zeros(pts.len()),
        ProblemType::TypeII => SymMatrix::from_diagonal(&stds.iter().map(|s| s * s).collect::<Vec<_>>()),
        ProblemType::TypeIII => {
            let rho = spec.correlation_matrix(pts);
            SymMatrix::from_lower_fn(pts.len(), |i, j| stds[i] * stds[j] * rho.get(i, j))
        }
    }
}

/// `δ δᵀ`.
pub fn direct_delta_to_matrix(delta: &[f64]) -> SymMatrix {
    SymMatrix::outer(delta)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `(1/(K N)) Σ_k Σ_r (f_k − y_r)²`, the single-point form shared by both
/// estimators.
pub fn omega_diagonal(f: &[f64], y: &[f64]) -> f64 {
    let s: f64 = f.iter().map(|fk| y.iter().map(|yr| (fk - yr).powi(2)).sum::<f64>()).sum();
    s / (f.len() * y.len()) as f64
}

/// Two-point estimate assuming independent realisations. The triple sum
/// factorises into residuals against the observation means.
pub fn omega_uncorrelated(fi: &[f64], fj: &[f64], yi: &[f64], yj: &[f64]) -> f64 {
    let (mi, mj) = (mean(yi), mean(yj));
    fi.iter().zip(fj).map(|(a, b)| (a - mi) * (b - mj)).sum::<f64>() / fi.len() as f64
}

/// Two-point estimate over co-realised pairs `(y_r(i), y_r(j))`.
pub fn omega_correlated(fi: &[f64], fj: &[f64], pairs: &[(f64, f64)]) -> f64 {
    let mut s = 0.0;
    for (a, b) in fi.iter().zip(fj) {
        for (yi, yj) in pairs {
            s += (a - yi) * (b - yj);
        }
    }
    s / (fi.len() * pairs.len()) as f64
}

fn members_at(summary: &PredictiveSummary, i: usize) -> Result<Vec<f64>> {
    if i >= summary.len() {
        return Err(Error::InvalidArgument(format!("index {i} out of range")));
    }
    Ok(summary.member_matrix.column(i).iter().copied().collect())
}

fn values_at(pool: &LabeledPool, i: usize) -> Result<Vec<f64>> {
    if i >= pool.len() {
        return Err(Error::InvalidArgument(format!("index {i} out of range")));
    }
    let v: Vec<f64> = pool.observations(i).iter().map(|o| o.value).collect();
    if v.is_empty() {
        return Err(Error::NotObserved(i));
    }
    Ok(v)
}

/// `δ̂(xᵢ)`: ensemble mean minus the mean observation.
pub fn empirical_bias(summary: &PredictiveSummary, pool: &LabeledPool, i: usize) -> Result<f64> {
    let y = values_at(pool, i)?;
    let f = members_at(summary, i)?;
    Ok(mean(&f) - mean(&y))
}

pub fn empirical_omega_uncorrelated(summary: &PredictiveSummary, pool: &LabeledPool, i: usize, j: usize) -> Result<f64> {
    let yi = values_at(pool, i)?;
    let fi = members_at(summary, i)?;
    if i == j {
        return Ok(omega_diagonal(&fi, &yi));
    }
    let yj = values_at(pool, j)?;
    let fj = members_at(summary, j)?;
    Ok(omega_uncorrelated(&fi, &fj, &yi, &yj))
}

pub fn co_realized_pairs(a: &[Observation], b: &[Observation]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for oa in a {
        for ob in b.iter().filter(|ob| ob.round_tag == oa.round_tag) {
            out.push((oa.value, ob.value));
        }
    }
    out
}

pub fn empirical_omega_correlated(summary: &PredictiveSummary, pool: &LabeledPool, i: usize, j: usize) -> Result<f64> {
    if i == j {
        return empirical_omega_uncorrelated(summary, pool, i, i);
    }
    if i >= pool.len() || j >= pool.len() {
        return Err(Error::InvalidArgument(format!("index pair ({i}, {j}) out of range")));
    }
    let pairs = co_realized_pairs(pool.observations(i), pool.observations(j));
    if pairs.is_empty() {
        return Err(Error::NotObserved(if pool.observations(i).is_empty() { i } else { j }));
    }
    Ok(omega_correlated(&members_at(summary, i)?, &members_at(summary, j)?, &pairs))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    #[default]
    Cheat,
    Direct,
    Quadratic,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Cheat => "cheat",
            EstimatorKind::Direct => "direct",
            EstimatorKind::Quadratic => "quadratic",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cheat" => Ok(EstimatorKind::Cheat),
            "direct" => Ok(EstimatorKind::Direct),
            "quadratic" => Ok(EstimatorKind::Quadratic),
            _ => Err(Error::InvalidArgument(format!("unknown estimator '{s}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Estimate {
    pub tau: TauVector,
    pub omega: Option<OmegaDecomposition>,
}

/// Everything an estimation back end may look at in one round.
pub struct EstimationContext<'a> {
    pub summary: &'a PredictiveSummary,
    pub pool: &'a LabeledPool,
    pub oracle: &'a GridOracle,
    pub round: u32,
    pub seed: u64,
    pub with_omega: bool,
}

/// Perfect-information estimate: `δ` from fresh oracle realisations at every
/// grid point and the true `Σ_Y`.
pub fn cheat_estimate(ctx: &EstimationContext<'_>, n_realizations: usize) -> Result<Estimate> {
    let oracle = ctx.oracle;
    let n = oracle.grid.len();
    if ctx.summary.len() != n {
        return Err(Error::InvalidArgument("summary does not cover the grid".into()));
    }
    let draws = if oracle.spec.problem_type.is_noisy() {
        n_realizations.max(1)
    } else {
        1
    };
    let mut rng = rng::stream(ctx.seed, Stream::Cheat, ctx.round as u64, 0);
    let mut acc = vec![0.0; n];
    for _ in 0..draws {
        for (a, y) in acc.iter_mut().zip(oracle.sample_grid(&mut rng)?) {
            *a += y;
        }
    }
    let delta: Vec<f64> = ctx
        .summary
        .mean
        .iter()
        .zip(&acc)
        .map(|(m, s)| m - s / draws as f64)
        .collect();
    let sigma_y2 = oracle.noise_stds().iter().map(|s| s * s).collect();
    let tau = TauVector::from_components(ctx.summary.variance.clone(), delta.clone(), sigma_y2)?;
    let omega = if ctx.with_omega {
        let sf = sigma_f_from_members(&ctx.summary.member_matrix)?;
        let om = assemble_omega(sf, direct_delta_to_matrix(&delta), sigma_y_known(&oracle.spec, &oracle.grid))?;
        Some(om.with_round(ctx.round).with_delta_vec(delta))
    } else {
        None
    };
    Ok(Estimate { tau, omega })
}

/// Per-point inputs `[x₁, x₂, μ_F, σ_F²]` for the estimators.
pub fn point_features(grid: &StateGrid, summary: &PredictiveSummary) -> Result<DMatrix<f64>> {
    if summary.len() != grid.len() {
        return Err(Error::InvalidArgument("summary does not cover the grid".into()));
    }
    let pts = grid.points();
    Ok(DMatrix::from_fn(grid.len(), 4, |i, c| match c {
        0 => pts[i][0],
        1 => pts[i][1],
        2 => summary.mean[i],
        _ => summary.variance[i],
    }))
}

/// Labelled indices with their empirical biases.
pub fn observed_biases(summary: &PredictiveSummary, pool: &LabeledPool) -> Result<(Vec<usize>, Vec<f64>)> {
    let idx = pool.labeled_indices();
    let d = idx.iter().map(|&i| empirical_bias(summary, pool, i)).collect::<Result<Vec<_>>>()?;
    Ok((idx, d))
}

pub fn direct_estimate(ctx: &EstimationContext<'_>, config: &DirectConfig) -> Result<Estimate> {
    let grid = &ctx.oracle.grid;
    let features = point_features(grid, ctx.summary)?;
    let idx = ctx.pool.labeled_indices();
    let targets = match config.target {
        DirectTarget::Bias => observed_biases(ctx.summary, ctx.pool)?.1,
        DirectTarget::Pemse => idx
            .iter()
            .map(|&i| empirical_omega_uncorrelated(ctx.summary, ctx.pool, i, i))
            .collect::<Result<Vec<_>>>()?,
    };
    let x_train = features.select_rows(idx.iter());
    let mut rng = rng::stream(ctx.seed, Stream::GpRestarts, ctx.round as u64, 0);
    let gp = GpRegressor::fit(&x_train, &targets, config, &mut rng)?;
    let mut pred = gp.predict(&features);
    if config.overwrite_observed {
        for (&i, &t) in idx.iter().zip(&targets) {
            pred[i] = t;
        }
    }
    let sigma_f2 = ctx.summary.variance.clone();
    match config.target {
        DirectTarget::Bias => {
            let tau = TauVector::from_components(sigma_f2, pred.clone(), vec![0.0; grid.len()])?;
            let omega = if ctx.with_omega {
                let sf = sigma_f_from_members(&ctx.summary.member_matrix)?;
                let om = assemble_omega(sf, direct_delta_to_matrix(&pred), SymMatrix::zeros(grid.len()))?;
                Some(om.with_round(ctx.round).with_delta_vec(pred))
            } else {
                None
            };
            Ok(Estimate { tau, omega })
        }
        DirectTarget::Pemse => {
            if ctx.with_omega {
                return Err(Error::InvalidArgument(
                    "a PEMSE-target direct estimate has no cobias matrix".into(),
                ));
            }
            Ok(Estimate {
                tau: TauVector::from_total(sigma_f2, pred)?,
                omega: None,
            })
        }
    }
}

pub fn quadratic_estimate(ctx: &EstimationContext<'_>, config: &QuadraticConfig) -> Result<Estimate> {
    let grid = &ctx.oracle.grid;
    let features = point_features(grid, ctx.summary)?;
    let (idx, d_hat) = observed_biases(ctx.summary, ctx.pool)?;
    let mut rng = rng::stream(ctx.seed, Stream::Quadratic, ctx.round as u64, 0);
    let est = QuadraticEstimator::fit(&features, &idx, &d_hat, config, &mut rng)?;
    let delta_mat = est.predict_delta_with(&features, &idx, &d_hat, config.overwrite_observed)?;
    let mut delta = est.signed_delta(&delta_mat, &idx, &d_hat);
    if config.overwrite_observed {
        for (&i, &d) in idx.iter().zip(&d_hat) {
            delta[i] = d;
        }
    }
    let tau = TauVector::from_components(ctx.summary.variance.clone(), delta.clone(), vec![0.0; grid.len()])?;
    let omega = if ctx.with_omega {
        let sf = sigma_f_from_members(&ctx.summary.member_matrix)?;
        let om = assemble_omega(sf, delta_mat, SymMatrix::zeros(grid.len()))?;
        Some(om.with_round(ctx.round).with_delta_vec(delta))
    } else {
        None
    };
    Ok(Estimate { tau, omega })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfigs {
    pub cheat_realizations: usize,
    pub direct: DirectConfig,
    pub quadratic: QuadraticConfig,
}

pub fn estimate(kind: EstimatorKind, ctx: &EstimationContext<'_>, configs: &EstimatorConfigs) -> Result<Estimate> {
    match kind {
        EstimatorKind::Cheat => cheat_estimate(ctx, configs.cheat_realizations),
        EstimatorKind::Direct => direct_estimate(ctx, &configs.direct),
        EstimatorKind::Quadratic => quadratic_estimate(ctx, &configs.quadratic),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::NoisyDraw;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn summary_from(rows: &[&[f64]]) -> PredictiveSummary {
        let k = rows.len();
        let n = rows[0].len();
        let m = DMatrix::from_fn(k, n, |r, c| rows[r][c]);
        if k == 1 {
            // a one-member "ensemble" for the hand examples; variance is unused
            return PredictiveSummary {
                mean: rows[0].to_vec(),
                variance: vec![0.0; n],
                member_matrix: m,
            };
        }
        PredictiveSummary::from_member_matrix(m).unwrap()
    }

    fn pool_with(n: usize, batches: &[(&[usize], &[f64])]) -> LabeledPool {
        let mut pool = LabeledPool::empty(n, ProblemType::TypeIII);
        for (r, (idx, vals)) in batches.iter().enumerate() {
            let draw = NoisyDraw {
                point_indices: idx.to_vec(),
                values: vals.to_vec(),
                round_tag: r as u32 + 1,
            };
            pool.commit_queries(idx, &draw).unwrap();
        }
        pool
    }

    #[test]
    fn tau_from_components() {
        let t = TauVector::from_components(vec![0.1, 0.0], vec![0.2, -1.0], vec![0.01, 0.0]).unwrap();
        assert_abs_diff_eq!(t.tau[0], 0.1 + 0.04 + 0.01, epsilon = 1e-15);
        assert_eq!(t.reducible[1], 1.0);
        assert!(TauVector::from_components(vec![0.1], vec![], vec![0.0]).is_err());
    }

    #[test]
    fn assemble_hand_example() {
        let sf = SymMatrix::identity(2).scale(0.1);
        let dm = direct_delta_to_matrix(&[1.0, -1.0]);
        let sy = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[0.04, 0.02, 0.02, 0.04])).unwrap();
        let om = assemble_omega(sf, dm, sy).unwrap();
        let want = [[1.14, -0.98], [-0.98, 1.14]];
        for (i, row) in want.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                assert_abs_diff_eq!(om.omega.get(i, j), w, epsilon = 1e-12);
            }
        }
        let z = assemble_omega(SymMatrix::zeros(3), SymMatrix::zeros(3), SymMatrix::zeros(3)).unwrap();
        assert_eq!(z.omega, SymMatrix::zeros(3));
        assert!(assemble_omega(SymMatrix::zeros(2), SymMatrix::zeros(3), SymMatrix::zeros(2)).is_err());
    }

    #[test]
    fn member_covariance() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, -2.0]);
        let s = sigma_f_from_members(&m).unwrap();
        assert_abs_diff_eq!(s.get(0, 1), -2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.get(0, 0), 2.0, epsilon = 1e-15);
        let same = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(sigma_f_from_members(&same).unwrap(), SymMatrix::zeros(2));
        assert!(sigma_f_from_members(&DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn member_covariance_diagonal_matches_variance() {
        let m = DMatrix::from_fn(5, 7, |k, i| ((k * 7 + i) as f64 * 0.37).sin());
        let s = sigma_f_from_members(&m).unwrap();
        let summary = PredictiveSummary::from_member_matrix(m).unwrap();
        for i in 0..7 {
            assert_abs_diff_eq!(s.get(i, i), summary.variance[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn known_aleatoric_covariance() {
        let grid = StateGrid::new(5).unwrap();
        let mut spec = OracleSpec {
            problem_type: ProblemType::TypeI,
            ..OracleSpec::default()
        };
        assert_eq!(sigma_y_known(&spec, &grid), SymMatrix::zeros(25));
        spec.problem_type = ProblemType::TypeII;
        let s2 = sigma_y_known(&spec, &grid);
        assert_abs_diff_eq!(s2.get(0, 0), 0.01, epsilon = 1e-15);
        assert_eq!(s2.get(0, 1), 0.0);
        // (0, 0) and (0, π/2) both have μ_Y = 0 and sit π/2 apart
        spec.problem_type = ProblemType::TypeIII;
        let s3 = sigma_y_known(&spec, &grid);
        assert_abs_diff_eq!(s3.get(0, 1), 0.01 * (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn bias_examples() {
        let s = summary_from(&[&[1.0, 5.0], &[2.0, 5.0], &[3.0, 5.0]]);
        let pool = pool_with(2, &[(&[0, 1], &[0.0, 5.0]), (&[0], &[0.0])]);
        assert_eq!(empirical_bias(&s, &pool, 0).unwrap(), 2.0);
        assert_eq!(empirical_bias(&s, &pool, 1).unwrap(), 0.0);
        let sparse = pool_with(2, &[(&[0], &[0.0])]);
        assert!(matches!(empirical_bias(&s, &sparse, 1), Err(Error::NotObserved(1))));
    }

    #[test]
    fn omega_hand_examples() {
        let s = summary_from(&[&[1.0, 2.0]]);
        // co-realised pairs (0, 1) and (2, 3)
        let pool = pool_with(2, &[(&[0, 1], &[0.0, 1.0]), (&[0, 1], &[2.0, 3.0])]);
        assert_abs_diff_eq!(empirical_omega_uncorrelated(&s, &pool, 0, 1).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(empirical_omega_correlated(&s, &pool, 0, 1).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(empirical_omega_uncorrelated(&s, &pool, 0, 0).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(
            empirical_omega_correlated(&s, &pool, 0, 0).unwrap(),
            empirical_omega_uncorrelated(&s, &pool, 0, 0).unwrap()
        );
    }

    #[test]
    fn omega_missing_data() {
        let s = summary_from(&[&[1.0, 2.0, 3.0]]);
        let pool = pool_with(3, &[(&[0], &[0.0]), (&[1], &[1.0])]);
        assert!(matches!(empirical_omega_uncorrelated(&s, &pool, 0, 2), Err(Error::NotObserved(2))));
        // observed, but never together
        assert!(matches!(empirical_omega_correlated(&s, &pool, 0, 1), Err(Error::NotObserved(_))));
        assert!(empirical_omega_uncorrelated(&s, &pool, 0, 1).is_ok());
    }

    #[test]
    fn perfect_fit_gives_zero_omega() {
        let s = summary_from(&[&[0.3, -0.2], &[0.3, -0.2]]);
        let pool = pool_with(2, &[(&[0, 1], &[0.3, -0.2]), (&[0, 1], &[0.3, -0.2])]);
        for (i, j) in [(0, 0), (0, 1), (1, 1)] {
            assert_eq!(empirical_omega_uncorrelated(&s, &pool, i, j).unwrap(), 0.0);
            assert_eq!(empirical_omega_correlated(&s, &pool, i, j).unwrap(), 0.0);
        }
    }

    #[test]
    fn uncorrelated_matches_triple_sum() {
        let fi = [0.3, 1.1, -0.4];
        let fj = [0.9, 0.2, 0.5];
        let yi = [0.1, 0.7];
        let yj = [-0.3, 0.4, 1.2];
        let mut brute = 0.0;
        for k in 0..3 {
            for r in &yi {
                for s in &yj {
                    brute += (fi[k] - r) * (fj[k] - s);
                }
            }
        }
        brute /= (3 * 2 * 3) as f64;
        assert_abs_diff_eq!(omega_uncorrelated(&fi, &fj, &yi, &yj), brute, epsilon = 1e-14);
    }

    #[test]
    fn delta_matrix_examples() {
        let m = direct_delta_to_matrix(&[3.0, 0.0, 4.0]);
        assert_eq!(m.trace(), 25.0);
        assert_eq!(direct_delta_to_matrix(&[0.0; 4]), SymMatrix::zeros(4));
    }

    #[test]
    fn cheat_on_noiseless_perfect_fit() {
        let grid = StateGrid::new(6).unwrap();
        let spec = OracleSpec {
            problem_type: ProblemType::TypeI,
            ..OracleSpec::default()
        };
        let oracle = GridOracle::new(spec, grid.clone()).unwrap();
        let truth = oracle.true_means();
        let m = DMatrix::from_fn(3, grid.len(), |k, i| truth[i] + (k as f64 - 1.0) * 0.1);
        let summary = PredictiveSummary::from_member_matrix(m).unwrap();
        let pool = LabeledPool::empty(grid.len(), ProblemType::TypeI);
        let ctx = EstimationContext {
            summary: &summary,
            pool: &pool,
            oracle: &oracle,
            round: 1,
            seed: 4,
            with_omega: true,
        };
        let est = cheat_estimate(&ctx, 10).unwrap();
        for i in 0..grid.len() {
            assert_abs_diff_eq!(est.tau.delta[i], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(est.tau.tau[i], summary.variance[i], epsilon = 1e-12);
        }
        let om = est.omega.unwrap();
        assert_eq!(om.round, 1);
        assert_eq!(om.sigma_y, SymMatrix::zeros(grid.len()));
    }

    #[test]
    fn cheat_on_noisy_problem() {
        let grid = StateGrid::new(3).unwrap();
        let oracle = GridOracle::new(OracleSpec::default(), grid.clone()).unwrap();
        let m = DMatrix::from_fn(2, grid.len(), |k, _| 0.5 + k as f64 * 0.1);
        let summary = PredictiveSummary::from_member_matrix(m).unwrap();
        let pool = LabeledPool::empty(grid.len(), ProblemType::TypeII);
        let ctx = EstimationContext {
            summary: &summary,
            pool: &pool,
            oracle: &oracle,
            round: 2,
            seed: 1,
            with_omega: false,
        };
        let est = cheat_estimate(&ctx, 10).unwrap();
        assert!(est.omega.is_none());
        // the 3×3 grid has (π, π) at index 4, where μ_Y = 1 and noise vanishes
        assert_abs_diff_eq!(est.tau.delta[4], 0.55 - 1.0, epsilon = 1e-12);
        for i in 0..grid.len() {
            assert_abs_diff_eq!(est.tau.reducible[i], est.tau.tau[i] - est.tau.sigma_y2[i], epsilon = 1e-12);
        }
        assert_eq!(est.tau.delta, cheat_estimate(&ctx, 10).unwrap().tau.delta);
    }

    #[test]
    fn estimator_ids() {
        for k in [EstimatorKind::Cheat, EstimatorKind::Direct, EstimatorKind::Quadratic] {
            assert_eq!(k.to_string().parse::<EstimatorKind>().unwrap(), k);
        }
        assert!("gp".parse::<EstimatorKind>().is_err());
    }

    proptest! {
        #[test]
        fn assembly_is_elementwise_sum(
            sf in prop::collection::vec(-1.0f64..1.0, 3),
            d in prop::collection::vec(-2.0f64..2.0, 3),
            sy in prop::collection::vec(0.0f64..0.1, 3),
        ) {
            let sigma_f = SymMatrix::outer(&sf);
            let sigma_y = SymMatrix::from_diagonal(&sy);
            let om = assemble_omega(sigma_f.clone(), direct_delta_to_matrix(&d), sigma_y.clone()).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let want = sigma_f.get(i, j) + d[i] * d[j] + sigma_y.get(i, j);
                    prop_assert!((om.omega.get(i, j) - want).abs() <= 1e-10);
                }
            }
            let tr = sigma_f.trace() + d.iter().map(|v| v * v).sum::<f64>() + sigma_y.trace();
            prop_assert!((om.omega.trace() - tr).abs() <= 1e-10);
        }

        #[test]
        fn diagonal_estimators_agree(
            f in prop::collection::vec(-1.0f64..1.0, 1..5),
            y in prop::collection::vec(-1.0f64..1.0, 1..5),
        ) {
            let members: Vec<&[f64]> = f.iter().map(std::slice::from_ref).collect();
            let s = summary_from(&members);
            let batches: Vec<(&[usize], &[f64])> = y.iter().map(|v| (&[0usize][..], std::slice::from_ref(v))).collect();
            let pool = pool_with(1, &batches);
            let u = empirical_omega_uncorrelated(&s, &pool, 0, 0).unwrap();
            let c = empirical_omega_correlated(&s, &pool, 0, 0).unwrap();
            prop_assert_eq!(u, c);
        }
    }
}
