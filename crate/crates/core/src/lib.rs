//! Generation and evaluation of alterfactual and counterfactual explanations
//! for binary image classifiers.

pub mod boundary;
pub mod classifier;
pub mod data;
pub mod error;
pub mod explainer;
pub mod image;
mod io;
pub mod metrics;
pub mod mode;
pub mod nn;
pub mod render;

pub use error::{Error, Result};
pub use image::Image;
pub use mode::ExplanationMode;
