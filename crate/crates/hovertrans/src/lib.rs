//! Anatomy-aware hybrid CNN-transformer classifier for layered medical
//! images, with strip/patch tokenization, five-fold evaluation, and
//! heatmap interpretability output.

pub mod autodiff;
pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod hover;
pub mod model;
pub mod nn;
pub mod raster;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
