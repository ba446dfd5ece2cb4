//! Conditional latent-ODE (cLODE) imitation learning for multi-agent
//! vehicle trajectory prediction.
//!
//! The crate is self-contained: a reverse-mode autodiff tensor core, an
//! ODE solver that is differentiable by backprop through its steps, the
//! cLODE encoder/decoder model with its ELBO objective, a kinematic
//! multi-agent simulator with a synthetic expert, trajectory/checkpoint
//! persistence, an Adam training loop, and an RMSE evaluation harness.

pub mod dataio;
pub mod error;
pub mod rng;
pub mod simenv;
pub mod trajectory;
pub mod model;
pub mod nn;
pub mod odesolve;
pub mod policy;
pub mod evaluator;
pub mod tensor;
pub mod trainer;

pub use error::{ClodeError, Result};
pub use tensor::{finite_diff_grad, GradientMap, GradientTape, Tensor};
