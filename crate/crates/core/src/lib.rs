//! A small deep-learning toolkit: f64 tensors, hand-differentiated layers,
//! losses, optimizers, MNIST-style data handling, model assembly and
//! adversarial perturbation.
// Validation is written as `!(x > 0.0)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversarial;
pub mod data;
pub mod error;
pub mod layers;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod tensor;

pub use error::{Error, Result};
pub use layers::{Layer, Mode};
pub use tensor::{Reduction, Tensor};
