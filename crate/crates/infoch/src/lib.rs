//! Capacity-calibrated Gaussian noise for federated learning.
//!
//! The library treats a training client's shared parameters as a noisy
//! communication channel from its dataset to the server, calibrates data-
//! space Gaussian noise so the channel carries at most a chosen number of
//! nats per local step, and then verifies empirically that reconstruction
//! attacks cannot beat the information-theoretic error floor that budget
//! implies.
//!
//! Modules, bottom up:
//!
//! - [`rng`]: counter-based deterministic randomness.
//! - [`spectral`]: covariance estimation, Jacobi eigendecomposition, and
//!   the Schur recursion behind the personalized bound.
//! - [`capacity`]: capacity formulas, calibration solvers, DP and batch
//!   bounds, compression deltas, and the reconstruction-error floor.
//! - [`channels`]: natural / white / personalized noise plans, reproducible
//!   sampling, and one-shot application to datasets.
//! - [`flsim`]: tiny models, deterministic local SGD, weighted aggregation
//!   every E steps, budget ledger, synthetic data.
//! - [`attacks`]: bias-ratio and gradient-matching inversion, the Bayes
//!   oracle, and bound verification.
//! - [`cli`]: the `infoch` command surface with stable file formats.
//!
//! See the crate examples for runnable walkthroughs of each capability.

pub mod attacks;
pub mod capacity;
pub mod channels;
pub mod cli;
pub mod flsim;
pub mod rng;
pub mod spectral;
