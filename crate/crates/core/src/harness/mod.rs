//! The seeded active-learning loop: fit → estimate → acquire → query →
//! commit, repeated over rounds and replicates, with flat-file outputs.

mod output;

pub use output::{
    emit_outputs, plot_dir, prepare_output_dir, quantile, read_summary, render_svg, summarize, write_runs_csv,
    write_summary_csv, SummaryRow, RUNS_HEADER,
};

use std::f64::consts::PI;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    eigen_matrix, eligible_mask, score, select_batch_eigen, select_batch_topm, select_single, BatchMode, ScoreInputs,
    Strategy,
};
use crate::cobias::{
    assemble_omega, estimate, sigma_f_from_members, DirectConfig, DirectTarget, Estimate, EstimationContext,
    EstimatorConfigs, EstimatorKind, QuadraticConfig, TauVector,
};
use crate::ensemble::{self, EnsembleConfig, PredictiveSummary};
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::oracle::{CorrelationMetric, GridOracle, OracleSpec, ProblemType};
use crate::pool::{LabeledPool, StateGrid};
use crate::rng::{self, Stream};

/// Every knob of an experiment, as one flat record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem_type: ProblemType,
    pub strategy: Strategy,
    pub estimator: EstimatorKind,
    pub batch_mode: BatchMode,
    pub n_init: usize,
    pub n_rounds: usize,
    pub batch_size: usize,
    pub grid_resolution: usize,
    pub n_replicates: usize,
    pub base_seed: u64,
    pub output_path: String,
    pub noise_scale: f64,
    pub correlation_rate: f64,
    pub correlation_metric: CorrelationMetric,
    pub ensemble_members: usize,
    pub ensemble_hidden_sizes: Vec<usize>,
    pub ensemble_learning_rate: f64,
    pub ensemble_bag_fraction: f64,
    pub ensemble_batch_size: usize,
    pub ensemble_min_improvement: f64,
    pub ensemble_patience: usize,
    pub ensemble_max_epochs: usize,
    pub cheat_realizations: usize,
    pub direct_target: DirectTarget,
    pub direct_restarts: usize,
    pub direct_optimizer_steps: usize,
    pub quadratic_embedding_dim: usize,
    pub quadratic_hidden_sizes: Vec<usize>,
    pub quadratic_learning_rate: f64,
    pub quadratic_weight_decay: f64,
    pub quadratic_dropout: f64,
    pub quadratic_patience: usize,
    pub quadratic_max_epochs: usize,
    pub quadratic_validation_fraction: f64,
    /// Keep empirical values where the estimators have data.
    pub overwrite_observed: bool,
    pub bald_noise_var: f64,
    /// Forbid repeated indices inside one eigen batch even when replicates
    /// are allowed.
    pub distinct_batch: bool,
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Small preset for CI and laptops.
    pub fn desk() -> Self {
        let ens = EnsembleConfig::default();
        let direct = DirectConfig::default();
        let quad = QuadraticConfig::default();
        Self {
            problem_type: ProblemType::TypeII,
            strategy: Strategy::Random,
            estimator: EstimatorKind::Cheat,
            batch_mode: BatchMode::Single,
            n_init: 20,
            n_rounds: 15,
            batch_size: 1,
            grid_resolution: 20,
            n_replicates: 5,
            base_seed: 0,
            output_path: "out".into(),
            noise_scale: 0.1,
            correlation_rate: 2.0 / PI,
            correlation_metric: CorrelationMetric::Euclidean,
            ensemble_members: ens.n_members,
            ensemble_hidden_sizes: ens.hidden_sizes,
            ensemble_learning_rate: ens.learning_rate,
            ensemble_bag_fraction: ens.bag_fraction,
            ensemble_batch_size: ens.batch_size,
            ensemble_min_improvement: ens.min_improvement,
            ensemble_patience: ens.patience,
            ensemble_max_epochs: ens.max_epochs,
            cheat_realizations: 10,
            direct_target: direct.target,
            direct_restarts: direct.n_restarts,
            direct_optimizer_steps: direct.optimizer_steps,
            quadratic_embedding_dim: quad.embedding_dim,
            quadratic_hidden_sizes: quad.hidden_sizes,
            quadratic_learning_rate: quad.learning_rate,
            quadratic_weight_decay: quad.weight_decay,
            quadratic_dropout: quad.dropout,
            quadratic_patience: quad.patience,
            quadratic_max_epochs: quad.max_epochs,
            quadratic_validation_fraction: quad.validation_fraction,
            overwrite_observed: true,
            bald_noise_var: 0.01,
            distinct_batch: false,
            parallel: true,
        }
    }

    /// Single-acquisition runs at full scale: 50×50 grid, 50 rounds, 10
    /// replicates.
    pub fn full_single() -> Self {
        Self {
            grid_resolution: 50,
            n_init: 100,
            n_rounds: 50,
            n_replicates: 10,
            ..Self::desk()
        }
    }

    /// Batched runs at full scale: 10 rounds of 10 queries from 10 initial
    /// points.
    pub fn full_batch() -> Self {
        Self {
            grid_resolution: 50,
            n_init: 10,
            n_rounds: 10,
            batch_size: 10,
            batch_mode: BatchMode::TopM,
            n_replicates: 10,
            problem_type: ProblemType::TypeIII,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full-single" => Ok(Self::full_single()),
            "full-batch" => Ok(Self::full_batch()),
            _ => Err(Error::InvalidArgument(format!(
                "unknown preset '{name}' (expected desk, full-single or full-batch)"
            ))),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Queries per round after applying the single-mode rule.
    pub fn effective_batch_size(&self) -> usize {
        if self.batch_mode == BatchMode::Single {
            1
        } else {
            self.batch_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.grid_resolution < 2 {
            return bad(format!("grid_resolution must be at least 2, got {}", self.grid_resolution));
        }
        let n = self.grid_resolution * self.grid_resolution;
        if self.n_init < 2 || self.n_init > n {
            return bad(format!("n_init must be in 2..={n}, got {}", self.n_init));
        }
        if self.n_replicates == 0 || self.effective_batch_size() == 0 {
            return bad("n_replicates and batch_size must be positive".into());
        }
        if self.problem_type == ProblemType::TypeI
            && self.n_init + self.n_rounds * self.effective_batch_size() > n
        {
            return bad(format!(
                "a noiseless run of {} rounds × {} cannot fit in {n} grid points after {} initial labels",
                self.n_rounds,
                self.effective_batch_size(),
                self.n_init
            ));
        }
        if self.estimator != EstimatorKind::Cheat && !self.strategy.accepts_estimated_bias() {
            return bad(format!(
                "strategy {} does not use a bias estimate; only the cheat estimator applies",
                self.strategy
            ));
        }
        if self.batch_mode == BatchMode::Eigen
            && matches!(self.strategy.base(), Strategy::Random | Strategy::Bald)
        {
            return bad(format!("strategy {} has no matrix form for eigen batching", self.strategy));
        }
        if self.batch_mode == BatchMode::Eigen
            && self.estimator == EstimatorKind::Direct
            && self.direct_target == DirectTarget::Pemse
        {
            return bad("eigen batching needs a bias target for the direct estimator".into());
        }
        if !(self.noise_scale >= 0.0 && self.correlation_rate > 0.0 && self.bald_noise_var > 0.0) {
            return bad("noise_scale, correlation_rate and bald_noise_var are out of range".into());
        }
        self.ensemble(0).validate()?;
        self.oracle_spec(0).validate()
    }

    pub fn oracle_spec(&self, seed: u64) -> OracleSpec {
        OracleSpec {
            problem_type: self.problem_type,
            noise_scale: self.noise_scale,
            correlation_rate: self.correlation_rate,
            correlation_metric: self.correlation_metric,
            rng_seed: seed,
        }
    }

    pub fn ensemble(&self, seed: u64) -> EnsembleConfig {
        EnsembleConfig {
            n_members: self.ensemble_members,
            hidden_sizes: self.ensemble_hidden_sizes.clone(),
            learning_rate: self.ensemble_learning_rate,
            bag_fraction: self.ensemble_bag_fraction,
            batch_size: self.ensemble_batch_size,
            min_improvement: self.ensemble_min_improvement,
            patience: self.ensemble_patience,
            max_epochs: self.ensemble_max_epochs,
            rng_seed: seed,
            parallel: self.parallel,
            ..EnsembleConfig::default()
        }
    }

    pub fn estimators(&self) -> EstimatorConfigs {
        EstimatorConfigs {
            cheat_realizations: self.cheat_realizations,
            direct: DirectConfig {
                target: self.direct_target,
                n_restarts: self.direct_restarts,
                optimizer_steps: self.direct_optimizer_steps,
                overwrite_observed: self.overwrite_observed,
                ..DirectConfig::default()
            },
            quadratic: QuadraticConfig {
                embedding_dim: self.quadratic_embedding_dim,
                hidden_sizes: self.quadratic_hidden_sizes.clone(),
                learning_rate: self.quadratic_learning_rate,
                weight_decay: self.quadratic_weight_decay,
                dropout: self.quadratic_dropout,
                patience: self.quadratic_patience,
                max_epochs: self.quadratic_max_epochs,
                validation_fraction: self.quadratic_validation_fraction,
                overwrite_observed: self.overwrite_observed,
                ..QuadraticConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: u32,
    pub n_labeled: usize,
    pub mse: f64,
    pub selected_indices: Vec<usize>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub config: ExperimentConfig,
    /// MSE of the model fitted on the initial pool.
    pub baseline_mse: f64,
    /// Rounds `1..=n_rounds` (fewer if the replicate failed).
    pub rows: Vec<RoundRow>,
    /// Rounds where a difference strategy used its base strategy instead.
    pub fallback_rounds: Vec<u32>,
    pub failed: Option<String>,
    pub version: String,
}

impl RunRecord {
    pub fn final_mse(&self) -> Option<f64> {
        self.rows.last().map(|r| r.mse)
    }
}

/// Mean squared gap between the ensemble mean and the true signal.
pub fn mse_vs_truth(mean: &[f64], truth: &[f64]) -> f64 {
    mean.iter().zip(truth).map(|(m, t)| (m - t).powi(2)).sum::<f64>() / truth.len() as f64
}

/// `τ` and (optionally) `Ω` from the ensemble alone, for strategies that do
/// not look at the bias.
fn variance_only(summary: &PredictiveSummary, with_omega: bool, round: u32) -> Result<Estimate> {
    let n = summary.len();
    let tau = TauVector::from_components(summary.variance.clone(), vec![0.0; n], vec![0.0; n])?;
    let omega = if with_omega {
        let sf = sigma_f_from_members(&summary.member_matrix)?;
        Some(assemble_omega(sf, SymMatrix::zeros(n), SymMatrix::zeros(n))?.with_round(round))
    } else {
        None
    };
    Ok(Estimate { tau, omega })
}

/// Rounds before this one use the base strategy in place of a difference
/// strategy.
pub const FIRST_DIFFERENCE_ROUND: u32 = 2;

struct Loop<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    oracle: GridOracle,
    truth: Vec<f64>,
    pool: LabeledPool,
    summary: PredictiveSummary,
    prev: Option<Estimate>,
    fallback_rounds: Vec<u32>,
}

impl Loop<'_> {
    fn step(&mut self) -> Result<RoundRow> {
        let started = Instant::now();
        let config = self.config;
        let k = self.pool.round();
        let with_omega = config.batch_mode == BatchMode::Eigen;
        let est = if config.strategy.accepts_estimated_bias() {
            let ctx = EstimationContext {
                summary: &self.summary,
                pool: &self.pool,
                oracle: &self.oracle,
                round: k,
                seed: self.seed,
                with_omega,
            };
            estimate(config.estimator, &ctx, &config.estimators())?
        } else {
            variance_only(&self.summary, with_omega, k)?
        };

        let mut strategy = config.strategy;
        if strategy.is_difference() && (k < FIRST_DIFFERENCE_ROUND || self.prev.is_none()) {
            strategy = strategy.base();
            self.fallback_rounds.push(k + 1);
            log::debug!("seed {} round {}: {} falls back to {}", self.seed, k + 1, config.strategy, strategy);
        }
        let eligible = eligible_mask(&self.pool);
        let m = config.effective_batch_size();
        let indices = match config.batch_mode {
            BatchMode::Eigen => {
                let curr = est.omega.as_ref().ok_or_else(|| Error::InvalidState("estimate has no Ω".into()))?;
                let prev = self.prev.as_ref().and_then(|p| p.omega.as_ref());
                let (matrix, mode) = eigen_matrix(strategy, curr, prev)?;
                let distinct = config.distinct_batch || self.pool.problem_type == ProblemType::TypeI;
                select_batch_eigen(&matrix, m, mode, &eligible, distinct)?.indices
            }
            mode => {
                let inputs = ScoreInputs {
                    summary: &self.summary,
                    tau: &est.tau,
                    prev_tau: self.prev.as_ref().map(|p| &p.tau),
                    eligible,
                    bald_noise_var: config.bald_noise_var,
                };
                let mut rng = rng::stream(self.seed, Stream::RandomStrategy, k as u64, 0);
                let scores = score(strategy, inputs, &mut rng)?;
                if mode == BatchMode::Single {
                    vec![select_single(&scores)?]
                } else {
                    select_batch_topm(&scores, m)?.indices
                }
            }
        };

        let mut rng = rng::stream(self.seed, Stream::Oracle, k as u64 + 1, 0);
        let draw = self.oracle.sample(&indices, k + 1, &mut rng)?;
        self.pool.commit_queries(&indices, &draw)?;
        let model = ensemble::fit(&self.pool, &self.oracle.grid, &config.ensemble(self.seed))?;
        self.summary = ensemble::predict(&model, &self.oracle.grid)?;
        self.prev = Some(est);
        Ok(RoundRow {
            round: k + 1,
            n_labeled: self.pool.observation_count(),
            mse: mse_vs_truth(&self.summary.mean, &self.truth),
            selected_indices: indices,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// One replicate. Errors inside the round loop end the replicate early and
/// are reported in `failed`; set-up errors are returned.
pub fn run_replicate(config: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    config.validate()?;
    let grid = StateGrid::new(config.grid_resolution)?;
    let oracle = GridOracle::new(config.oracle_spec(seed), grid)?;
    let pool = LabeledPool::init(&oracle, config.n_init, &mut rng::stream(seed, Stream::PoolInit, 0, 0))?;
    let model = ensemble::fit(&pool, &oracle.grid, &config.ensemble(seed))?;
    let summary = ensemble::predict(&model, &oracle.grid)?;
    let truth = oracle.true_means();
    let baseline_mse = mse_vs_truth(&summary.mean, &truth);
    let mut state = Loop {
        config,
        seed,
        oracle,
        truth,
        pool,
        summary,
        prev: None,
        fallback_rounds: Vec::new(),
    };
    let mut rows = Vec::with_capacity(config.n_rounds);
    let mut failed = None;
    for _ in 0..config.n_rounds {
        match state.step() {
            Ok(row) => {
                log::info!(
                    "seed {seed} {} round {}: mse {:.5}",
                    config.strategy,
                    row.round,
                    row.mse
                );
                rows.push(row);
            }
            Err(e) => {
                log::warn!("seed {seed}: replicate aborted at round {}: {e}", state.pool.round() + 1);
                failed = Some(e.to_string());
                break;
            }
        }
    }
    Ok(RunRecord {
        seed,
        config: config.clone(),
        baseline_mse,
        rows,
        fallback_rounds: state.fallback_rounds,
        failed,
        version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

/// All replicates, seeds `base_seed + r`, in replicate order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let seeds: Vec<u64> = (0..config.n_replicates as u64).map(|r| config.base_seed + r).collect();
    let run = |&seed: &u64| {
        run_replicate(config, seed).unwrap_or_else(|e| RunRecord {
            seed,
            config: config.clone(),
            baseline_mse: f64::NAN,
            rows: Vec::new(),
            fallback_rounds: Vec::new(),
            failed: Some(e.to_string()),
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    };
    Ok(if config.parallel {
        seeds.par_iter().map(run).collect()
    } else {
        seeds.iter().map(run).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            grid_resolution: 6,
            n_init: 8,
            n_rounds: 3,
            n_replicates: 2,
            ensemble_max_epochs: 60,
            ..ExperimentConfig::desk()
        }
    }

    #[test]
    fn config_json_is_flat_and_strict() {
        let c = tiny();
        let json = c.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v.as_object().unwrap().values().all(|x| !x.is_object()));
        assert_eq!(ExperimentConfig::from_json(&json).unwrap(), c);
        assert!(ExperimentConfig::from_json(r#"{"n_init": 5, "bogus": 1}"#).is_err());
        let partial = ExperimentConfig::from_json(r#"{"strategy": "diff-pemse", "problem_type": 3}"#).unwrap();
        assert_eq!(partial.strategy, Strategy::DiffPemse);
        assert_eq!(partial.problem_type, ProblemType::TypeIII);
        assert_eq!(partial.n_init, ExperimentConfig::desk().n_init);
    }

    #[test]
    fn validation_rules() {
        assert!(tiny().validate().is_ok());
        let single = ExperimentConfig {
            batch_size: 10,
            ..tiny()
        };
        assert_eq!(single.effective_batch_size(), 1);
        let lc_direct = ExperimentConfig {
            strategy: Strategy::LeastConfidence,
            estimator: EstimatorKind::Direct,
            ..tiny()
        };
        assert!(lc_direct.validate().is_err());
        let diff_direct = ExperimentConfig {
            strategy: Strategy::DiffLc,
            estimator: EstimatorKind::Direct,
            ..tiny()
        };
        assert!(diff_direct.validate().is_ok());
        let random_eigen = ExperimentConfig {
            batch_mode: BatchMode::Eigen,
            ..tiny()
        };
        assert!(random_eigen.validate().is_err());
        let overfull = ExperimentConfig {
            problem_type: ProblemType::TypeI,
            n_rounds: 100,
            ..tiny()
        };
        assert!(overfull.validate().is_err());
        assert!(ExperimentConfig::preset("nope").is_err());
        assert_eq!(ExperimentConfig::preset("full-single").unwrap().grid_resolution, 50);
    }

    #[test]
    fn constant_offset_mse() {
        let truth = [0.3, -0.2, 0.9];
        let mean: Vec<f64> = truth.iter().map(|t| t + 0.1).collect();
        assert!((mse_vs_truth(&mean, &truth) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn replicate_bookkeeping() {
        let c = ExperimentConfig {
            strategy: Strategy::Pemse,
            batch_mode: BatchMode::TopM,
            batch_size: 3,
            ..tiny()
        };
        let r = run_replicate(&c, 7).unwrap();
        assert!(r.failed.is_none());
        assert_eq!(r.rows.len(), 3);
        for (k, row) in r.rows.iter().enumerate() {
            assert_eq!(row.round, k as u32 + 1);
            assert_eq!(row.n_labeled, 8 + 3 * (k + 1));
            assert_eq!(row.selected_indices.len(), 3);
            assert!(row.mse.is_finite());
        }
    }

    #[test]
    fn noiseless_random_run_labels_every_point() {
        let c = ExperimentConfig {
            problem_type: ProblemType::TypeI,
            grid_resolution: 4,
            n_init: 4,
            n_rounds: 12,
            ..tiny()
        };
        let r = run_replicate(&c, 1).unwrap();
        assert!(r.failed.is_none(), "{:?}", r.failed);
        assert_eq!(r.rows.last().unwrap().n_labeled, 16);
        let mut all: Vec<usize> = r.rows.iter().flat_map(|row| row.selected_indices.clone()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 12);
    }

    #[test]
    fn baseline_is_shared_across_strategies() {
        let a = run_replicate(&tiny(), 3).unwrap();
        let b = run_replicate(
            &ExperimentConfig {
                strategy: Strategy::BiasReduction,
                ..tiny()
            },
            3,
        )
        .unwrap();
        assert_eq!(a.baseline_mse, b.baseline_mse);
    }

    #[test]
    fn difference_strategy_falls_back_early() {
        let c = ExperimentConfig {
            strategy: Strategy::DiffPemse,
            n_rounds: 4,
            ..tiny()
        };
        let r = run_replicate(&c, 2).unwrap();
        assert!(r.failed.is_none());
        assert_eq!(r.fallback_rounds, vec![1, 2]);
    }

    #[test]
    fn experiment_is_scheduling_independent() {
        let par = run_experiment(&tiny()).unwrap();
        let ser = run_experiment(&ExperimentConfig {
            parallel: false,
            ..tiny()
        })
        .unwrap();
        assert_eq!(par.len(), 2);
        for (a, b) in par.iter().zip(&ser) {
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.baseline_mse, b.baseline_mse);
            let strip = |r: &RunRecord| r.rows.iter().map(|x| (x.mse, x.selected_indices.clone())).collect::<Vec<_>>();
            assert_eq!(strip(a), strip(b));
        }
    }
}
