//! Pixel-wise conditioned GANs: a generator receives a sparse map of pixel values it
//! should reproduce, and an L2 penalty on the masked residual is added to the
//! conditional adversarial objective with weight `λ`.

pub mod checkpoint;
pub mod constraints;
pub mod data;
pub mod error;
pub mod experiment;
pub mod generate;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod sweep;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::ImageGrid;
