//! Amortized text-to-mesh generation on the CPU.
//!
//! A single prompt-conditioned network maps a text embedding to a triplane,
//! and three small implicit heads turn triplane queries into a signed distance
//! field, vertex offsets and vertex colors on a deformable tetrahedral grid.
//! Training runs in two stages: volumetric SDF rendering at low resolution,
//! then rasterized mesh rendering with deformation enabled. Inference is a
//! single feed-forward pass from prompt to colored triangle mesh.

pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dmtet;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod guidance;
pub mod heads;
pub mod io;
pub mod model;
pub mod neus;
pub mod par;
pub mod params;
pub mod raster;
pub mod scalar;
pub mod selfcheck;
pub mod shading;
pub mod tensor;
pub mod train;
pub mod triplane;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::{Tape, Tensor, Var};
