//! Fast identity checks behind `aicau selftest`.
//!
//! Each check builds a small randomised instance, evaluates the quantity by
//! brute force and compares it with what the library assembles.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::acquisition::{kappa, select_batch_eigen, EigenMode};
use crate::cobias::{
    assemble_omega, direct_delta_to_matrix, omega_correlated, omega_uncorrelated, sigma_f_from_members, TauVector,
};
use crate::linalg::{sym_eigen, SymMatrix};
use crate::rng::StreamRng;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// A finite distribution over function values at two points.
struct Discrete {
    probs: Vec<f64>,
    at: [Vec<f64>; 2],
}

impl Discrete {
    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let atoms = rng.random_range(1..8);
        let w: Vec<f64> = (0..atoms).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = w.iter().sum();
        let mut vals = || (0..atoms).map(|_| rng.random_range(-2.0..2.0)).collect();
        Discrete {
            probs: w.iter().map(|p| p / total).collect(),
            at: [vals(), vals()],
        }
    }

    fn mean(&self, p: usize) -> f64 {
        self.probs.iter().zip(&self.at[p]).map(|(w, v)| w * v).sum()
    }

    fn cov(&self, a: usize, b: usize) -> f64 {
        let (ma, mb) = (self.mean(a), self.mean(b));
        (0..self.probs.len())
            .map(|k| self.probs[k] * (self.at[a][k] - ma) * (self.at[b][k] - mb))
            .sum()
    }
}

/// `E[(F(a) − Y(a))(F(b) − Y(b))]` with `F` and `Y` independent.
fn joint_error(f: &Discrete, y: &Discrete, a: usize, b: usize) -> f64 {
    let mut s = 0.0;
    for (pk, k) in f.probs.iter().zip(0..) {
        for (qm, m) in y.probs.iter().zip(0..) {
            s += pk * qm * (f.at[a][k] - y.at[a][m]) * (f.at[b][k] - y.at[b][m]);
        }
    }
    s
}

pub fn bias_variance_identity(rng: &mut StreamRng, trials: usize) -> CheckResult {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let f = Discrete::random(rng);
        let y = Discrete::random(rng);
        let tau = TauVector::from_components(vec![f.cov(0, 0)], vec![f.mean(0) - y.mean(0)], vec![y.cov(0, 0)])
            .expect("equal lengths");
        worst = worst.max((joint_error(&f, &y, 0, 0) - tau.tau[0]).abs());
    }
    CheckResult {
        name: "bias-variance identity",
        passed: worst <= 1e-10,
        detail: format!("{trials} pairs, max error {worst:.2e}"),
    }
}

pub fn cobias_identity(rng: &mut StreamRng, trials: usize) -> CheckResult {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let f = Discrete::random(rng);
        let y = Discrete::random(rng);
        let sym = |d: &Discrete| {
            SymMatrix::new(DMatrix::from_fn(2, 2, |i, j| d.cov(i, j))).expect("covariance is symmetric")
        };
        let delta = [f.mean(0) - y.mean(0), f.mean(1) - y.mean(1)];
        let om = assemble_omega(sym(&f), direct_delta_to_matrix(&delta), sym(&y)).expect("2x2 inputs");
        for (a, b) in [(0, 0), (0, 1), (1, 1)] {
            worst = worst.max((joint_error(&f, &y, a, b) - om.omega.get(a, b)).abs());
        }
    }
    CheckResult {
        name: "cobias-covariance identity",
        passed: worst <= 1e-10,
        detail: format!("{trials} point pairs, max error {worst:.2e}"),
    }
}

pub fn aleatoric_cancellation(rng: &mut StreamRng, trials: usize) -> CheckResult {
    let mut mismatches = 0;
    for _ in 0..trials {
        let n = rng.random_range(1..50);
        let mut field = || -> Vec<f64> { (0..n).map(|_| rng.random_range(0.0..1.0)).collect() };
        let sy = field();
        let (f0, d0, f1, d1) = (field(), field(), field(), field());
        let prev = TauVector::from_components(f0, d0, sy.clone()).expect("equal lengths");
        let curr = TauVector::from_components(f1, d1, sy).expect("equal lengths");
        let full = kappa(&prev.tau, &curr.tau).expect("equal lengths");
        let red = kappa(&prev.reducible, &curr.reducible).expect("equal lengths");
        // exact up to the rounding of the two additions of σ_Y²
        if full.iter().zip(&red).any(|(a, b)| (a - b).abs() > 4.0 * f64::EPSILON * (1.0 + a.abs())) {
            mismatches += 1;
        }
    }
    CheckResult {
        name: "aleatoric cancellation",
        passed: mismatches == 0,
        detail: format!("{trials} field pairs, {mismatches} mismatches"),
    }
}

pub fn trace_and_rank(rng: &mut StreamRng) -> CheckResult {
    let (n, k) = (100, 5);
    let members = DMatrix::from_fn(k, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let delta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sf = sigma_f_from_members(&members).expect("K >= 2");
    let om = assemble_omega(sf, direct_delta_to_matrix(&delta), SymMatrix::zeros(n)).expect("same dims");
    let eig = sym_eigen(&om.omega).expect("converges");
    let trace_err = (om.omega.trace() - eig.values.iter().sum::<f64>()).abs();
    let rank = eig.numerical_rank(1e-8);
    CheckResult {
        name: "trace identity and rank bound",
        passed: trace_err <= 1e-8 * n as f64 && rank <= k,
        detail: format!("trace error {trace_err:.2e}, rank {rank} (bound {k})"),
    }
}

pub fn empirical_omega(rng: &mut StreamRng, draws: usize) -> CheckResult {
    // hand example: members f = (1, 2), co-realised pairs (0, 1) and (2, 3)
    let hand_c = omega_correlated(&[1.0], &[2.0], &[(0.0, 1.0), (2.0, 3.0)]);
    let hand_u = omega_uncorrelated(&[1.0], &[2.0], &[0.0, 2.0], &[1.0, 3.0]);
    // Y jointly Gaussian with unit variances and correlation 0.6
    let (mu, rho) = ([0.3, -0.4], 0.6);
    let fi = [0.5, 1.0, -0.2];
    let fj = [0.1, -0.6, 0.4];
    let mut pairs = Vec::with_capacity(draws);
    for _ in 0..draws {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        pairs.push((mu[0] + z1, mu[1] + rho * z1 + (1.0 - rho * rho).sqrt() * z2));
    }
    let cross: f64 = fi.iter().zip(&fj).map(|(a, b)| (a - mu[0]) * (b - mu[1])).sum::<f64>() / 3.0;
    let corr_err = (omega_correlated(&fi, &fj, &pairs) - (cross + rho)).abs();
    let (yi, yj): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let unc_err = (omega_uncorrelated(&fi, &fj, &yi, &yj) - cross).abs();
    let tol = 5.0 / (draws as f64).sqrt();
    CheckResult {
        name: "empirical omega estimators",
        passed: (hand_c - 1.0).abs() < 1e-12 && hand_u.abs() < 1e-12 && corr_err < tol && unc_err < tol,
        detail: format!(
            "hand example {hand_c} vs {hand_u}; S = {draws}: errors {corr_err:.2e}, {unc_err:.2e} (tol {tol:.2e})"
        ),
    }
}

pub fn eigen_batch_rank_one(rng: &mut StreamRng, trials: usize) -> CheckResult {
    let mut wrong = 0;
    for _ in 0..trials {
        let n = rng.random_range(2..=50);
        let delta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut best = 0;
        for i in 1..n {
            if delta[i].abs() > delta[best].abs() {
                best = i;
            }
        }
        let sel = select_batch_eigen(&direct_delta_to_matrix(&delta), 1, EigenMode::Omega, &vec![true; n], true);
        if sel.map(|s| s.indices).ok() != Some(vec![best]) {
            wrong += 1;
        }
    }
    CheckResult {
        name: "eigen batch equals argmax |delta|",
        passed: wrong == 0,
        detail: format!("{trials} rank-1 matrices, {wrong} disagreements"),
    }
}

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    use rand::SeedableRng;
    let mut rng = StreamRng::seed_from_u64(seed);
    vec![
        bias_variance_identity(&mut rng, 200),
        cobias_identity(&mut rng, 200),
        aleatoric_cancellation(&mut rng, 100),
        trace_and_rank(&mut rng),
        empirical_omega(&mut rng, 100_000),
        eigen_batch_rank_one(&mut rng, 100),
    ]
}
