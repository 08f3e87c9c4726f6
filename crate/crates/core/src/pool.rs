//! State grid and labelled-pool bookkeeping.

use std::f64::consts::PI;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{GridOracle, NoisyDraw, Point, ProblemType};

/// `resolution²` points on `[0, 2π]²`, endpoints included, row-major with
/// `x₁` varying slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct StateGrid {
    resolution: usize,
    points: Vec<Point>,
}

impl StateGrid {
    pub fn new(resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid resolution must be at least 2, got {resolution}"
            )));
        }
        let step = 2.0 * PI / (resolution - 1) as f64;
        let axis: Vec<f64> = (0..resolution)
            .map(|i| if i + 1 == resolution { 2.0 * PI } else { i as f64 * step })
            .collect();
        let points = axis
            .iter()
            .flat_map(|&a| axis.iter().map(move |&b| [a, b]))
            .collect();
        Ok(Self { resolution, points })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Result<Point> {
        self.points.get(i).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("grid index {i} out of range (n = {})", self.len()))
        })
    }
}

pub fn build_grid(resolution: usize) -> Result<StateGrid> {
    StateGrid::new(resolution)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub value: f64,
    pub round_tag: u32,
}

/// Every realisation gathered so far, grouped by grid index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPool {
    pub problem_type: ProblemType,
    observations: Vec<Vec<Observation>>,
    labeled_mask: Vec<bool>,
    round: u32,
    /// `history[0]` is the initial design, `history[k]` the batch of round `k`.
    history: Vec<Vec<usize>>,
}

impl LabeledPool {
    pub fn empty(n: usize, problem_type: ProblemType) -> Self {
        Self {
            problem_type,
            observations: vec![Vec::new(); n],
            labeled_mask: vec![false; n],
            round: 0,
            history: vec![Vec::new()],
        }
    }

    /// Label `n_init` distinct indices drawn uniformly without replacement,
    /// with one oracle draw (joint under type III) tagged round 0.
    pub fn init<R: Rng + ?Sized>(oracle: &GridOracle, n_init: usize, rng: &mut R) -> Result<Self> {
        let n = oracle.grid.len();
        if n_init == 0 || n_init > n {
            return Err(Error::InvalidArgument(format!(
                "n_init must be in 1..={n}, got {n_init}"
            )));
        }
        let indices = index::sample(rng, n, n_init).into_vec();
        let draw = oracle.sample(&indices, 0, rng)?;
        let mut pool = Self::empty(n, oracle.spec.problem_type);
        pool.store(&draw);
        pool.history[0] = indices;
        Ok(pool)
    }

    /// Append a committed batch; increments the round. The draw must carry
    /// tag `round + 1`.
    pub fn commit_queries(&mut self, indices: &[usize], draw: &NoisyDraw) -> Result<()> {
        if draw.point_indices != indices || draw.values.len() != indices.len() {
            return Err(Error::InvalidArgument("draw is not aligned with the queried indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!("grid index {bad} out of range")));
        }
        let tag = self.round + 1;
        if draw.round_tag != tag {
            return Err(Error::InvalidArgument(format!(
                "draw tagged {} but the next round is {tag}",
                draw.round_tag
            )));
        }
        if self.problem_type == ProblemType::TypeI {
            let mut seen = vec![false; self.len()];
            for &i in indices {
                if self.labeled_mask[i] || seen[i] {
                    return Err(Error::ConstraintViolation(format!(
                        "index {i} would be measured twice in a noiseless problem"
                    )));
                }
                seen[i] = true;
            }
        }
        self.store(draw);
        self.round = tag;
        self.history.push(indices.to_vec());
        Ok(())
    }

    fn store(&mut self, draw: &NoisyDraw) {
        for (&i, &value) in draw.point_indices.iter().zip(&draw.values) {
            self.observations[i].push(Observation {
                value,
                round_tag: draw.round_tag,
            });
            self.labeled_mask[i] = true;
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn history(&self) -> &[Vec<usize>] {
        &self.history
    }

    pub fn labeled_mask(&self) -> &[bool] {
        &self.labeled_mask
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.labeled_mask[i]
    }

    pub fn observations(&self, i: usize) -> &[Observation] {
        &self.observations[i]
    }

    /// Distinct labelled indices, ascending.
    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labeled_mask[i]).collect()
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled_mask.iter().filter(|&&b| b).count()
    }

    pub fn observation_count(&self) -> usize {
        self.observations.iter().map(Vec::len).sum()
    }

    /// One `(index, value)` row per realisation, in index then arrival order.
    pub fn training_rows(&self) -> Vec<(usize, f64)> {
        self.observations
            .iter()
            .enumerate()
            .flat_map(|(i, obs)| obs.iter().map(move |o| (i, o.value)))
            .collect()
    }

    pub fn mean_observation(&self, i: usize) -> Option<f64> {
        let obs = &self.observations[i];
        if obs.is_empty() {
            None
        } else {
            Some(obs.iter().map(|o| o.value).sum::<f64>() / obs.len() as f64)
        }
    }

    /// The pool as it stood after `round` commits.
    pub fn truncated(&self, round: u32) -> Result<Self> {
        if round > self.round {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate round {} pool to round {round}",
                self.round
            )));
        }
        let observations: Vec<Vec<Observation>> = self
            .observations
            .iter()
            .map(|obs| obs.iter().copied().filter(|o| o.round_tag <= round).collect())
            .collect();
        let labeled_mask = observations.iter().map(|o| !o.is_empty()).collect();
        Ok(Self {
            problem_type: self.problem_type,
            observations,
            labeled_mask,
            round,
            history: self.history[..=round as usize].to_vec(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let pool: Self = serde_json::from_str(s)?;
        pool.check_invariants()?;
        Ok(pool)
    }

    fn check_invariants(&self) -> Result<()> {
        if self.labeled_mask.len() != self.observations.len() {
            return Err(Error::InvalidState("mask and observation store differ in length".into()));
        }
        for (i, obs) in self.observations.iter().enumerate() {
            if self.labeled_mask[i] == obs.is_empty() {
                return Err(Error::InvalidState(format!("labeled mask disagrees at index {i}")));
            }
            if obs.iter().any(|o| o.round_tag > self.round) {
                return Err(Error::InvalidState(format!("index {i} has a tag beyond the current round")));
            }
        }
        if self.history.len() != self.round as usize + 1 {
            return Err(Error::InvalidState("history length does not match round".into()));
        }
        Ok(())
    }
}
