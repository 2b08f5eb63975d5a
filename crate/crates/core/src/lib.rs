//! Multilabel image classification with a micro residual network.
//!
//! Each class is an independent Bernoulli variable: the network emits one
//! logit per class, a sigmoid turns it into a presence probability, and
//! training minimizes binary cross-entropy. Everything from the tensor
//! arithmetic up is implemented here without an external ML framework.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
