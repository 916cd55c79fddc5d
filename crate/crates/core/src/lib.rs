//! Multimodal hyperspectral + SAR/LiDAR patch classifier.
//!
//! The crate is self-contained: [`autodiff`] provides the tensor tape every model
//! block is written against, [`preprocess`] turns co-registered rasters into
//! patch samples, [`model`] holds the network, and [`train`] / [`commands`] drive
//! experiments end to end.

pub mod autodiff;
pub mod checks;
pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod preprocess;
pub mod profile;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
