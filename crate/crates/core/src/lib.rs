//! Source-free domain adaptation for binary two-class segmentation.
//!
//! A teacher network produces Monte Carlo dropout pseudo-labels that are
//! denoised with refined prototype filtering; the student trains on them with
//! a quantile-filtered entropy term, and the teacher follows the student
//! through an uncertainty-gated EMA.

pub mod audit;
pub mod autodiff;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod quantile;
pub mod rpf;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod ugema;
pub mod uncertainty;

pub use error::{Error, Result};
pub use tensor::Tensor;
