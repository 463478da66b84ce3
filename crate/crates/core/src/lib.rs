//! Factorised video transformer with a multi-branch head and a hybrid
//! focal plus correlation loss, trained on synthetic imbalanced cohorts.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix the
//! precision.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type McVivit32 = model::McVivit<f32>;
pub type McVivit64 = model::McVivit<f64>;
pub type ParamStore32 = model::ParamStore<f32>;
pub type ParamStore64 = model::ParamStore<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
