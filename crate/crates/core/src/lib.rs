//! Spiking vision transformer whose attention scores come from
//! spike-timing-dependent plasticity over first-spike latencies, with
//! surrogate-gradient training, an energy profiler and firing-rate maps.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the precision for common uses.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod coding;
pub mod config;
pub mod data;
pub mod error;
pub mod lif;
pub mod model;
pub mod profiler;
pub mod scalar;
pub mod sfr;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use data::{Dataset, DatasetRecord};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use model::{Model, Model32, Model64, ModelConfig};
pub use tensor::{SurrogateKind, SurrogateSpec, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
