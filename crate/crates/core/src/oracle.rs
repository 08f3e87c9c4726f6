//! Simulated ground truth on `[0, 2π]²`.
//!
//! The signal is `μ(x) = sin(3x₁/2)·sin(3x₂/2)`. Observation noise is absent
//! (type I), independent heteroskedastic Gaussian (type II), or the same
//! marginals coupled by an exponential correlation kernel (type III).

use std::f64::consts::PI;
use std::fmt;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, JitterPolicy, SymMatrix};
use crate::pool::StateGrid;

pub type Point = [f64; 2];

/// Noise regime of the oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ProblemType {
    /// Noiseless.
    TypeI,
    /// Uncorrelated heteroskedastic noise.
    TypeII,
    /// Correlated heteroskedastic noise.
    TypeIII,
}

impl ProblemType {
    pub fn is_noisy(self) -> bool {
        !matches!(self, ProblemType::TypeI)
    }
}

impl TryFrom<u8> for ProblemType {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(ProblemType::TypeI),
            2 => Ok(ProblemType::TypeII),
            3 => Ok(ProblemType::TypeIII),
            _ => Err(format!("problem type must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<ProblemType> for u8 {
    fn from(p: ProblemType) -> u8 {
        match p {
            ProblemType::TypeI => 1,
            ProblemType::TypeII => 2,
            ProblemType::TypeIII => 3,
        }
    }
}

impl fmt::Display for ProblemType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

/// Distance used inside the correlation kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMetric {
    #[default]
    Euclidean,
    L1,
    Linf,
}

impl CorrelationMetric {
    pub fn distance(self, a: Point, b: Point) -> f64 {
        let dx = (a[0] - b[0]).abs();
        let dy = (a[1] - b[1]).abs();
        match self {
            CorrelationMetric::Euclidean => dx.hypot(dy),
            CorrelationMetric::L1 => dx + dy,
            CorrelationMetric::Linf => dx.max(dy),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub problem_type: ProblemType,
    /// Peak noise standard deviation (reached where `μ = 0`).
    pub noise_scale: f64,
    /// Decay rate `r` in `ρ = exp(−r·d)`; type III only.
    pub correlation_rate: f64,
    pub correlation_metric: CorrelationMetric,
    pub rng_seed: u64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            problem_type: ProblemType::TypeII,
            noise_scale: 0.1,
            correlation_rate: 2.0 / PI,
            correlation_metric: CorrelationMetric::Euclidean,
            rng_seed: 0,
        }
    }
}

/// One batch of realisations drawn together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyDraw {
    pub point_indices: Vec<usize>,
    pub values: Vec<f64>,
    pub round_tag: u32,
}

pub fn mean_signal(x: Point) -> f64 {
    (1.5 * x[0]).sin() * (1.5 * x[1]).sin()
}

impl OracleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.noise_scale < 0.0 || !self.noise_scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise_scale must be finite and non-negative, got {}",
                self.noise_scale
            )));
        }
        if self.problem_type == ProblemType::TypeIII
            && !(self.correlation_rate > 0.0 && self.correlation_rate.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "correlation_rate must be positive, got {}",
                self.correlation_rate
            )));
        }
        Ok(())
    }

    pub fn noise_std(&self, x: Point) -> f64 {
        if self.problem_type == ProblemType::TypeI {
            return 0.0;
        }
        let mu = mean_signal(x);
        // sin can overshoot 1 by an ulp
        (1.0 - mu * mu).max(0.0).sqrt() * self.noise_scale
    }

    pub fn noise_correlation(&self, x: Point, y: Point) -> f64 {
        (-self.correlation_rate * self.correlation_metric.distance(x, y)).exp()
    }

    /// Correlation matrix of the noise across `points`: identity unless type III.
    pub fn correlation_matrix(&self, points: &[Point]) -> SymMatrix {
        match self.problem_type {
            ProblemType::TypeIII => SymMatrix::from_lower_fn(points.len(), |i, j| {
                if i == j {
                    1.0
                } else {
                    self.noise_correlation(points[i], points[j])
                }
            }),
            _ => SymMatrix::identity(points.len()),
        }
    }
}

/// `μ + diag(σ)·(C z)` with `z` standard normal drawn in index order. `C = I`
/// when `factor` is `None`.
pub fn sample_with_factor<R: Rng + ?Sized>(
    means: &[f64],
    stds: &[f64],
    factor: Option<&DMatrix<f64>>,
    rng: &mut R,
) -> Vec<f64> {
    let n = means.len();
    let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let eps = match factor {
        Some(c) => c * z,
        None => z,
    };
    (0..n).map(|i| means[i] + stds[i] * eps[i]).collect()
}

/// Draw one realisation per index (duplicates allowed), jointly for type III.
pub fn sample<R: Rng + ?Sized>(
    spec: &OracleSpec,
    grid: &StateGrid,
    indices: &[usize],
    round_tag: u32,
    rng: &mut R,
) -> Result<NoisyDraw> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("sample needs at least one point".into()));
    }
    let points = indices
        .iter()
        .map(|&i| grid.point(i))
        .collect::<Result<Vec<_>>>()?;
    let means: Vec<f64> = points.iter().map(|&p| mean_signal(p)).collect();
    let values = match spec.problem_type {
        ProblemType::TypeI => means,
        ProblemType::TypeII => {
            let stds: Vec<f64> = points.iter().map(|&p| spec.noise_std(p)).collect();
            sample_with_factor(&means, &stds, None, rng)
        }
        ProblemType::TypeIII => {
            let stds: Vec<f64> = points.iter().map(|&p| spec.noise_std(p)).collect();
            let corr = spec.correlation_matrix(&points);
            let c = cholesky(&corr, JitterPolicy::default())?;
            sample_with_factor(&means, &stds, Some(&c.l), rng)
        }
    };
    Ok(NoisyDraw {
        point_indices: indices.to_vec(),
        values,
        round_tag,
    })
}

/// Oracle bound to a grid, caching the grid-wide correlation factor used for
/// full-grid realisations.
#[derive(Debug)]
pub struct GridOracle {
    pub spec: OracleSpec,
    pub grid: StateGrid,
    grid_factor: OnceLock<Result<DMatrix<f64>, String>>,
}

impl GridOracle {
    pub fn new(spec: OracleSpec, grid: StateGrid) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            grid,
            grid_factor: OnceLock::new(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, indices: &[usize], round_tag: u32, rng: &mut R) -> Result<NoisyDraw> {
        sample(&self.spec, &self.grid, indices, round_tag, rng)
    }

    pub fn true_means(&self) -> Vec<f64> {
        self.grid.points().iter().map(|&p| mean_signal(p)).collect()
    }

    pub fn noise_stds(&self) -> Vec<f64> {
        self.grid.points().iter().map(|&p| self.spec.noise_std(p)).collect()
    }

    /// One realisation at every grid index, jointly for type III.
    pub fn sample_grid<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let means = self.true_means();
        match self.spec.problem_type {
            ProblemType::TypeI => Ok(means),
            ProblemType::TypeII => Ok(sample_with_factor(&means, &self.noise_stds(), None, rng)),
            ProblemType::TypeIII => {
                let factor = self
                    .grid_factor
                    .get_or_init(|| {
                        let corr = self.spec.correlation_matrix(self.grid.points());
                        cholesky(&corr, JitterPolicy::default())
                            .map(|c| c.l)
                            .map_err(|e| e.to_string())
                    })
                    .as_ref()
                    .map_err(|e| Error::Numerical(e.clone()))?;
                Ok(sample_with_factor(&means, &self.noise_stds(), Some(factor), rng))
            }
        }
    }
}
