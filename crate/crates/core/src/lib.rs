//! Active learning for noisy regression driven by the bias–variance and
//! cobias–covariance decompositions of the expected squared error.
//!
//! The crate is organised bottom-up:
//!
//! - [`oracle`]: ground-truth signal and the three noise regimes;
//! - [`pool`]: state grid and labelled-pool bookkeeping;
//! - [`ensemble`]: the deep ensemble whose error is being reduced;
//! - [`linalg`]: symmetric eigendecomposition, Cholesky, PSD projection;
//! - [`cobias`]: empirical and estimated bias, PEMSE and `Ω` matrices;
//! - [`acquisition`]: scoring, the difference operator and batch selection;
//! - [`harness`]: the seeded experiment loop and its outputs.

pub mod acquisition;
pub mod cobias;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod nn;
pub mod oracle;
pub mod pool;
pub mod rng;
pub mod selftest;
pub mod ensemble;

pub use error::{Error, Result};
