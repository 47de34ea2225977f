//! Jacobian-regularized training and robustness analysis for small dense
//! classifiers.
//!
//! The squared Frobenius norm of the input-output Jacobian, and its gradient
//! with respect to the parameters, is available three ways: an exact sweep
//! over output basis vectors ([`jacreg::jacreg_exact`]), an unbiased
//! random-projection estimate ([`jacreg::jacreg_estimate`]), and the
//! closed-form layer recursion ([`jacreg::cyclopropagation`]). The
//! [`train`] module optimizes the joint loss with SGD and momentum;
//! [`robust`] measures what that buys against noise and gradient attacks.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod jacreg;
pub mod nn;
pub mod rng;
pub mod robust;
pub mod selfcheck;
pub mod slice;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use nn::{Activation, Dense, ForwardTrace, Mlp, Mode, ParamGrads};
pub use rng::Stream;
pub use tensor::Tensor;
