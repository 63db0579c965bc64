//! Embedding-loss distillation on toy diffusion targets.
//!
//! * [`kernel`]: RBF kernels and multi-bandwidth MMD².
//! * [`embed`]: frozen random embedding networks and the embedding loss.
//! * [`diffusion`]: noise schedule, analytic targets, score networks, teacher
//!   training and the probability-flow sampler.
//! * [`distill`]: one-step generator distillation with optional auxiliary losses.
//! * [`variance`]: gradient-variance sampling, decomposition and the optimal
//!   mixing weight.
//! * [`metrics`]: sliced Wasserstein distance, mode coverage and evaluation MMD.

pub mod diffusion;
pub mod distill;
pub mod embed;
pub mod error;
pub mod kernel;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod variance;

pub use error::{CoreError, Result};
