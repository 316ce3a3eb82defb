//! Two-stage gaze following.
//!
//! A direction pathway predicts where a person looks from their head crop and position.
//! The prediction is rasterized into multi-scale gaze direction fields, which are
//! concatenated with the scene and fed to a heatmap pathway whose argmax is the gaze
//! point. Everything is differentiable end to end through [`autodiff::Tape`].

pub mod autodiff;
pub mod data;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod grid_csv;
pub mod heatmap;
pub mod model;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use field::{Direction, NormalizedPoint};
pub use heatmap::Heatmap;
pub use tensor::Tensor;
