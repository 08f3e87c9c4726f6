//! Acquisition scores, the difference operator `κ`, and single, top-m and
//! eigendecomposition batch selection.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cobias::{OmegaDecomposition, TauVector};
use crate::ensemble::PredictiveSummary;
use crate::error::{Error, Result};
use crate::linalg::{sym_eigen, SymMatrix};
use crate::oracle::ProblemType;
use crate::pool::LabeledPool;

/// Eigenvalues at or below `EIGEN_REL_TOL · max|λ|` are treated as zero.
pub const EIGEN_REL_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    Random,
    LeastConfidence,
    Bald,
    BiasReduction,
    Pemse,
    DiffLc,
    DiffBr,
    DiffPemse,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Random,
        Strategy::LeastConfidence,
        Strategy::Bald,
        Strategy::BiasReduction,
        Strategy::Pemse,
        Strategy::DiffLc,
        Strategy::DiffBr,
        Strategy::DiffPemse,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::LeastConfidence => "lc",
            Strategy::Bald => "bald",
            Strategy::BiasReduction => "br",
            Strategy::Pemse => "pemse",
            Strategy::DiffLc => "diff-lc",
            Strategy::DiffBr => "diff-br",
            Strategy::DiffPemse => "diff-pemse",
        }
    }

    pub fn is_difference(self) -> bool {
        matches!(self, Strategy::DiffLc | Strategy::DiffBr | Strategy::DiffPemse)
    }

    /// The non-difference counterpart (identity for the others).
    pub fn base(self) -> Strategy {
        match self {
            Strategy::DiffLc => Strategy::LeastConfidence,
            Strategy::DiffBr => Strategy::BiasReduction,
            Strategy::DiffPemse => Strategy::Pemse,
            s => s,
        }
    }

    /// Whether an estimated (non-oracle) back end may drive this strategy.
    pub fn accepts_estimated_bias(self) -> bool {
        self.is_difference() || matches!(self, Strategy::BiasReduction | Strategy::Pemse)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy '{s}'")))
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.id().to_string()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    #[default]
    Single,
    TopM,
    Eigen,
}

impl fmt::Display for BatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BatchMode::Single => "single",
            BatchMode::TopM => "topm",
            BatchMode::Eigen => "eigen",
        })
    }
}

impl FromStr for BatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(BatchMode::Single),
            "topm" => Ok(BatchMode::TopM),
            "eigen" => Ok(BatchMode::Eigen),
            _ => Err(Error::InvalidArgument(format!("unknown batch mode '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionScores {
    pub strategy: Strategy,
    pub values: Vec<f64>,
    pub eligible: Vec<bool>,
}

/// `κ[g](x) = g_{k−1}(x) − g_k(x)`.
pub fn kappa(prev: &[f64], curr: &[f64]) -> Result<Vec<f64>> {
    if prev.len() != curr.len() {
        return Err(Error::InvalidArgument(format!(
            "kappa needs equal lengths, got {} and {}",
            prev.len(),
            curr.len()
        )));
    }
    Ok(prev.iter().zip(curr).map(|(p, c)| p - c).collect())
}

/// Noiseless problems never re-query a labelled point.
pub fn eligible_mask(pool: &LabeledPool) -> Vec<bool> {
    match pool.problem_type {
        ProblemType::TypeI => pool.labeled_mask().iter().map(|l| !l).collect(),
        _ => vec![true; pool.len()],
    }
}

/// `½ ln(1 + σ_F²/σ̂²)`, a Gaussian-predictive stand-in for BALD.
pub fn bald(variance: &[f64], noise_var: f64) -> Vec<f64> {
    variance.iter().map(|v| 0.5 * (v / noise_var).ln_1p()).collect()
}

pub struct ScoreInputs<'a> {
    pub summary: &'a PredictiveSummary,
    pub tau: &'a TauVector,
    pub prev_tau: Option<&'a TauVector>,
    pub eligible: Vec<bool>,
    pub bald_noise_var: f64,
}

pub fn score<R: Rng + ?Sized>(strategy: Strategy, inputs: ScoreInputs<'_>, rng: &mut R) -> Result<AcquisitionScores> {
    let n = inputs.eligible.len();
    if inputs.summary.len() != n || inputs.tau.len() != n {
        return Err(Error::InvalidArgument("score inputs do not cover the same grid".into()));
    }
    let tau = inputs.tau;
    let values = match strategy {
        Strategy::Random => (0..n).map(|_| rng.random::<f64>()).collect(),
        Strategy::LeastConfidence => inputs.summary.variance.clone(),
        Strategy::Bald => bald(&inputs.summary.variance, inputs.bald_noise_var),
        Strategy::BiasReduction => tau.bias_squared(),
        Strategy::Pemse => tau.reducible.clone(),
        diff => {
            let prev = inputs.prev_tau.ok_or_else(|| {
                Error::Unavailable(format!("{diff} needs the previous round's estimate"))
            })?;
            match diff {
                Strategy::DiffLc => kappa(&prev.sigma_f2, &tau.sigma_f2)?,
                Strategy::DiffBr => kappa(&prev.bias_squared(), &tau.bias_squared())?,
                _ => kappa(&prev.tau, &tau.tau)?,
            }
        }
    };
    Ok(AcquisitionScores {
        strategy,
        values,
        eligible: inputs.eligible,
    })
}

fn ranked_eligible(values: &[f64], eligible: &[bool]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| eligible[i]).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Eligible argmax, lowest index on ties.
pub fn select_single(scores: &AcquisitionScores) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &ok)) in scores.values.iter().zip(&scores.eligible).enumerate() {
        if ok && best.is_none_or(|b| v > scores.values[b]) {
            best = Some(i);
        }
    }
    best.ok_or(Error::ExhaustedPool)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Score { value: f64 },
    Eigen { rank: usize, eigenvalue: f64, magnitude: f64 },
    Fallback { diag: f64 },
}

impl Provenance {
    pub fn is_fallback(&self) -> bool {
        matches!(self, Provenance::Fallback { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchSelection {
    pub indices: Vec<usize>,
    pub mode: BatchMode,
    pub provenance: Vec<Provenance>,
}

/// The `m` best distinct eligible indices, descending.
pub fn select_batch_topm(scores: &AcquisitionScores, m: usize) -> Result<BatchSelection> {
    if m == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let ranked = ranked_eligible(&scores.values, &scores.eligible);
    if ranked.len() < m {
        return Err(Error::ExhaustedPool);
    }
    let indices: Vec<usize> = ranked[..m].to_vec();
    let provenance = indices
        .iter()
        .map(|&i| Provenance::Score {
            value: scores.values[i],
        })
        .collect();
    Ok(BatchSelection {
        indices,
        mode: BatchMode::TopM,
        provenance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EigenMode {
    /// `Ω` itself (PSD).
    Omega,
    /// `Ω⁽ᵏ⁻¹⁾ − Ω⁽ᵏ⁾`.
    OmegaDifference,
}

/// For each leading positive eigenpair pick `argmaxᵢ |vⱼ(i)|`; remaining
/// slots are filled by the largest remaining diagonal entries. Both modes
/// use only eigenvalues above `EIGEN_REL_TOL · max|λ|`: for `Ω` the rest is
/// numerical null space, for a difference they are the non-improving modes.
pub fn select_batch_eigen(
    matrix: &SymMatrix,
    m: usize,
    _mode: EigenMode,
    eligible: &[bool],
    distinct: bool,
) -> Result<BatchSelection> {
    let n = matrix.dim();
    if m == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if eligible.len() != n {
        return Err(Error::InvalidArgument("eligible mask does not match the matrix".into()));
    }
    let n_eligible = eligible.iter().filter(|&&e| e).count();
    if n_eligible == 0 || (distinct && n_eligible < m) {
        return Err(Error::ExhaustedPool);
    }
    let eig = sym_eigen(matrix)?;
    let tol = EIGEN_REL_TOL * eig.scale();
    let mut taken = vec![false; n];
    let mut indices = Vec::with_capacity(m);
    let mut provenance = Vec::with_capacity(m);
    for (rank, &lambda) in eig.values.iter().enumerate() {
        if indices.len() == m || lambda <= tol {
            break;
        }
        let v = eig.vector(rank);
        let mut order: Vec<usize> = (0..n).filter(|&i| eligible[i]).collect();
        order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
        let pick = order.into_iter().find(|&i| !(distinct && taken[i]));
        if let Some(i) = pick {
            taken[i] = true;
            indices.push(i);
            provenance.push(Provenance::Eigen {
                rank,
                eigenvalue: lambda,
                magnitude: v[i].abs(),
            });
        }
    }
    if indices.len() < m {
        let diag = matrix.diagonal();
        let ranked = ranked_eligible(&diag, eligible);
        let fresh: Vec<usize> = ranked.iter().copied().filter(|&i| !taken[i]).collect();
        let fill = if fresh.is_empty() { ranked } else { fresh };
        for i in fill.into_iter().cycle().take(m - indices.len()) {
            indices.push(i);
            provenance.push(Provenance::Fallback { diag: diag[i] });
        }
    }
    Ok(BatchSelection {
        indices,
        mode: BatchMode::Eigen,
        provenance,
    })
}

/// The matrix whose eigenvectors drive eigen batching for `strategy`.
pub fn eigen_matrix(
    strategy: Strategy,
    curr: &OmegaDecomposition,
    prev: Option<&OmegaDecomposition>,
) -> Result<(SymMatrix, EigenMode)> {
    fn part(strategy: Strategy, o: &OmegaDecomposition) -> Result<&SymMatrix> {
        match strategy.base() {
            Strategy::Pemse => Ok(&o.omega),
            Strategy::BiasReduction => Ok(&o.delta_mat),
            Strategy::LeastConfidence => Ok(&o.sigma_f),
            s => Err(Error::InvalidArgument(format!("strategy {s} has no matrix form for eigen batching"))),
        }
    }
    let c = part(strategy, curr)?;
    if strategy.is_difference() {
        let p = prev.ok_or_else(|| Error::Unavailable(format!("{strategy} needs the previous round's matrix")))?;
        Ok((part(strategy, p)?.sub(c)?, EigenMode::OmegaDifference))
    } else {
        Ok((c.clone(), EigenMode::Omega))
    }
}
