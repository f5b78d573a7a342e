//! Part-aware generalized category discovery on pre-extracted feature tensors.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom of this file pin the common instantiations. Feature
//! containers are always stored as `f32`.

// `!(x > 0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod candidates;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod parts;
pub mod scalar;
pub mod trainer;
pub mod transport;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Prototypes64 = candidates::Prototypes<f64>;
pub type Prototypes32 = candidates::Prototypes<f32>;
pub type GmmParams64 = parts::GmmParams<f64>;
pub type GmmParams32 = parts::GmmParams<f32>;
pub type PartAttentionMap64 = parts::PartAttentionMap<f64>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type BatchViewPair64 = objectives::BatchViewPair<f64>;
pub type TrainState64 = trainer::TrainState<f64>;
