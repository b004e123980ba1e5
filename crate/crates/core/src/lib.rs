//! Slot-memory attention bottleneck for multi-task learning.
//!
//! The numeric core is generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below fix it to `f64`, which is what the experiments and gradient checks
//! use.

pub mod attention;
pub mod cost;
pub mod error;
pub mod etf;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod metrics;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::Var;
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph = graph::Graph<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type TaskFeatureBlock = attention::TaskFeatureBlock<f64>;
pub type MemorySlots = attention::MemorySlots<f64>;
pub type KemParams = attention::KemParams<f64>;
pub type KemVars = attention::KemVars<f64>;
pub type CrossAttentionParams = attention::CrossAttentionParams<f64>;
pub type EtfFrame = etf::EtfFrame<f64>;
pub type ParamStore = train::ParamStore<f64>;
pub type OptimizerState = train::OptimizerState<f64>;
pub type TaskScore = metrics::TaskScore<f64>;
