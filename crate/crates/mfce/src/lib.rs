//! Desk-scale training laboratory for fully convolutional sequence acoustic
//! models trained with multi-frame cross-entropy: dense prediction over
//! windows longer than the receptive field, so several adjacent frame labels
//! supervise one forward pass at marginal cost.

pub mod cli;
pub mod config;
pub mod convgeom;
pub mod corpus;
pub mod costmodel;
pub mod error;
pub mod loss;
pub mod model;
pub mod presets;
mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
