//! Receptive-field analysis for convolutional networks.
//!
//! Networks are described in a small line-oriented DSL ([`netspec`]), built
//! into differentiable layer graphs ([`autograd`]) and analysed through
//! theoretical receptive fields and coverage counts ([`rf`]), gradient-based
//! effective receptive fields ([`erf`]) and the metrics over them
//! ([`metrics`]). [`micro`] trains networks from scratch on the
//! micro-object classification task.

pub mod autograd;
pub mod erf;
pub mod error;
pub mod field;
pub mod metrics;
pub mod micro;
pub mod netspec;
pub mod parallel;
pub mod pnm;
pub mod rf;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape4, Tensor4};
