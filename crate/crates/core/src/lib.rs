//! Multi-view-to-mesh fusion engine.
//!
//! Reconstructs a textured mesh from per-view RGB/normal/mask images by
//! optimizing a neural signed-distance field with differentiable volume
//! rendering. Cross-view appearance conflicts are modeled by a learned
//! per-point conflict scalar that down-weights inconsistent color
//! supervision, and per-view rigid pose corrections are optimized jointly
//! with the field. A desk-scale latent transformer with geometry/texture
//! alignment attention and EDM-style denoiser preconditioning lives in
//! [`gta`] and [`edm`]; synthetic ground-truth scenes and evaluation metrics
//! in [`synth`] and [`metrics`].

pub mod camera;
pub mod dataset;
pub mod edm;
pub mod field;
pub mod fusion;
pub mod gradcheck;
pub mod gta;
pub mod hashgrid;
pub mod math;
pub mod mesh;
pub mod mesh_tables;
pub mod metrics;
pub mod params;
pub mod render;
pub mod rng;
pub mod synth;
pub mod tape;

use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dataset validation failed: {0}")]
    Dataset(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("no surface found at the zero level set")]
    NoSurface,
    #[error("mesh is not watertight ({0}); repair or re-voxelize before volume metrics")]
    NotWatertight(String),
}

pub type Result<T> = std::result::Result<T, Error>;
