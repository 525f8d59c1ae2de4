//! Tensors, reverse-mode autodiff, Adam, seeded streams and Gaussian statistics.

mod adam;
mod attention;
mod gaussian;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod param;
mod rng;
mod tensor;

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2};
pub use attention::AttentionSpec;
pub use gaussian::{GaussianModel, COVARIANCE_FLOOR};
pub use gradcheck::grad_check;
pub use graph::{Graph, Var};
pub use param::Parameter;
pub use rng::RngStream;
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests;
