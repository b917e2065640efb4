//! Bayesian registration of functional data with Gaussian-process priors.
//!
//! Curves observed on a shared time grid are aligned by monotone warps built
//! from exponentiated base functions. Estimation is by an adapted variational
//! Bayes fit or a Metropolis-within-Gibbs sampler; extensions cover noisy
//! observations and prediction of partially observed curves.

pub mod avb;
pub mod error;
pub mod linalg;
pub mod mcmc;
pub mod metrics;
pub mod model;
pub mod penalties;
pub mod prediction;
pub mod simulate;
pub mod smoothing;
pub mod warping;

pub use error::{Error, Result};
pub use penalties::{build_penalty_set, build_time_grid, DerivativeOrder, PenaltySet, TimeGrid};
