//! Future-boundary-frame extrapolation toolkit.
//!
//! Trains patch-based neural predictors on sequences of boundary images,
//! rolls them forward recursively or sequence-to-sequence, and scores them
//! with boundary precision-recall. Ships a deterministic billiard-world
//! generator for synthetic "intuitive physics" experiments.
//!
//! All numeric kernels are generic over [`scalar::Scalar`]; training and
//! inference run in `f32`, gradient checking in `f64`.

pub mod config;
pub mod data;
pub mod eval;
pub mod graph;
pub mod models;
pub mod optim;
pub mod pgm;
pub mod predict;
pub mod sim;
pub mod scalar;
pub mod tensor;
pub mod train;

/// Default training/inference element type.
pub type Tensor32 = tensor::Tensor<f32>;
/// Gradient-check element type.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type Model32 = models::Model<f32>;
pub type Model64 = models::Model<f64>;
