//! Streaming radiance-field training for multi-view video.
//!
//! Frames arrive one at a time; the field is optimized for a handful of
//! iterations per frame, conditioned on the multi-view colors each 3D sample
//! projects to, while a probabilistic occupancy grid carried across frames
//! (blurred at every frame boundary, raised where the field reports density)
//! decides which ray samples are worth evaluating.

pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod occgrid;
pub mod projcolor;
pub mod raster;
pub mod renderer;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
