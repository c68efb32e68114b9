//! Fusion-based adversarial change detection between heterogeneous optical
//! images: a low-spatial/high-spectral observation at one date and a
//! high-spatial/low-spectral observation at another.
//!
//! The pipeline infers a full-resolution change image with a CI network,
//! corrects the second observation with it, fuses the result with the first
//! observation, re-degrades the fused image, and trains the CI network so that
//! a discriminator cannot tell the prediction from the real observation.

pub mod cdgan;
pub mod config;
pub mod datagen;
pub mod detect;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod image;
pub mod io;
pub mod nn;
pub mod operators;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
pub use image::{frobenius_norm, group21_norm, image_sub, BinaryMap, HyperImage, Shape};
pub use operators::{
    adjoint_spatial, adjoint_spectral, apply_spatial, apply_spectral, corrupt_operators, DegradationPair,
    OperatorConfig, SpatialOp, SpectralOp,
};
pub use rng::Rng;
pub use cdgan::{GeneratorState, TrainConfig, TrainLog};
pub use config::ExperimentConfig;
pub use detect::{EnergyMap, ThresholdMode};
pub use eval::RocCurve;
pub use fusion::{FusionBackend, FusionConfig, ModelBasedFusion, TikhonovConfig};
pub use nn::{ArchConfig, Network};
pub use pipeline::{run_pipeline, Report, RunOptions};
