//! Small neural radiance fields with multi-view-geometry supervision.
//!
//! The crate trains a pair of coarse/fine MLP radiance fields from posed RGB
//! images plus per-view depth and normal maps (e.g. from a multi-view-stereo
//! pipeline), weighting the geometric supervision by a per-pixel confidence
//! derived from forward-backward reprojection consistency. Trained fields can
//! be rendered to color/depth/normal images and polygonized with marching
//! cubes. A synthetic analytic scene (sphere + box) provides ground truth for
//! end-to-end evaluation.
//!
//! Module map:
//! - [`geometry`]: cameras, poses, rays, image buffers, and the on-disk
//!   formats (COLMAP-style pose text, PFM float maps, ASCII PLY).
//! - [`field`]: the positional-encoded MLP pair, forward/backward passes, and
//!   checkpoint serialization.
//! - [`renderer`]: stratified + importance sampling and volumetric
//!   compositing of color, expected depth, and density-gradient normals.
//! - [`priors`]: reprojection-consistency confidence maps and confidence
//!   filtered point-cloud fusion.
//! - [`synthetic`]: the analytic test scene, dataset generation, prior
//!   corruption, and ground-truth surface sampling.
//! - [`dataset`]: on-disk dataset layout shared by the CLI subcommands.
//! - [`training`]: losses, Adam, and the training loop.
//! - [`extraction`]: density-grid sampling and marching cubes.
//! - [`metrics`]: PSNR / SSIM / symmetric Chamfer distance and evaluation
//!   drivers.

pub mod config;
pub mod dataset;
pub mod error;
pub mod extraction;
pub mod field;
pub mod geometry;
pub mod metrics;
pub mod priors;
pub mod renderer;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
