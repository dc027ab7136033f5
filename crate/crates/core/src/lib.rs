//! Saliency-guided successor-feature pretraining with a consistency policy,
//! on a small pixel gridworld, plus an exact tabular oracle.
//!
//! Lower layers (`tensor`, `nn`, `linalg`) are generic over [`scalar::Scalar`];
//! the learning modules run in `f64`, exposed through the aliases below.

pub mod dataset;
pub mod env;
pub mod error;
pub mod evaluate;
pub mod linalg;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod repr;
pub mod rng;
pub mod saliency;
pub mod scalar;
pub mod successor;
pub mod tensor;
pub mod trainer;

pub use error::TrainError;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = tensor::Graph<f64>;
pub type Mlp64 = nn::Mlp<f64>;
pub type Matrix64 = linalg::Matrix<f64>;
pub type Checkpoint64 = tensor::Checkpoint<f64>;
