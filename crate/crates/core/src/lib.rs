//! Point-cloud diffusion toolkit: a DDPM whose denoiser encodes voxelized
//! clouds, picks latent points with a time-variant mix of graph high-pass
//! ranking and farthest-point sampling, processes them with two serialized
//! bidirectional selective state-space streams, and decodes per-point noise.
//! Ships with the usual generative metrics (CD, EMD, 1-NNA, COV).

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod curves;
pub mod diffusion;
pub mod geometry;
pub mod metrics;
pub mod io;
pub mod model;
pub mod spectral;
pub mod ssm;

pub use error::{Error, Result};
