//! Unposed sparse-view novel view synthesis and 3D distillation.
//!
//! A set-latent scene transformer ([`srt`]) turns a handful of unposed images
//! into a token set and view-aligned query features; a conditional denoiser
//! ([`diffusion`]) consumes both; a hash-grid neural field ([`distill`]) is
//! then optimized against the denoiser's predictions. [`eval`] scores results
//! with warp-aligned metrics and [`pipeline`] strings the stages together.

pub mod data;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod imaging;
pub mod nn;
pub mod pipeline;
pub mod srt;

pub use error::{Error, Result};
pub use geometry::{
    anchor_frame, camera_rays, plucker_encode, solve_anchor_point, CameraPose, Intrinsics, PluckerRay, Ray, RayGrid,
    SimilarityTransform,
};
