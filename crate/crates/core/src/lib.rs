//! Multimodal chest X-ray abnormality detection from image and radiologist
//! eye-gaze fixation maps, at desk scale.

pub mod error;
pub mod fsutil;
pub mod gaze;
pub mod dataset;
pub mod detector;
pub mod geometry;
pub mod metrics;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
