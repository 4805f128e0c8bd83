//! Point-based cell detection and classification.
//!
//! A small convolutional encoder with pyramidal feature aggregation feeds three
//! heads (offset regression, objectness, classification) evaluated at fixed
//! anchor points. Training pairs ground-truth points with proposals by a
//! minimum-cost one-to-one assignment. A density-map baseline with peak
//! search is included for comparison.

pub mod backbone;
pub mod data;
pub mod density;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod matching;
pub mod render;
pub mod run;
pub mod tensor;
pub mod train;
pub mod types;

pub use error::{Error, Result};
