//! Multi-species genomic profile prediction at desk scale: a species-aware
//! sparse mixture-of-experts encoder with a profile-grouped dual-gated
//! decoder, trained with a Poisson + mutual-information objective on
//! synthetic planted-motif data, with a from-scratch reverse-mode autodiff
//! core and a verification suite built on finite differences and metric
//! oracles.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod kernels;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod routing;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, NodeId, Tape};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError, TensorResult};
