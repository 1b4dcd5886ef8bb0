//! Dynamic 3D Gaussian splatting for deformable scenes with depth supervision.
//!
//! The pipeline is:
//!
//! 1. [`ingest`] loads a frame sequence (RGB, stereo depth, tissue mask, camera).
//! 2. [`init`] fuses depth-prior point clouds from every frame into a dense
//!    initial [`GaussianCloud`].
//! 3. [`deform`] moves each Gaussian through time with a learned sum of
//!    Gaussian radial basis functions.
//! 4. [`render`] projects, sorts and alpha-composites colour and depth, and
//!    differentiates the compositing.
//! 5. [`train`] combines the photometric, normalized depth and edge-aware
//!    smoothness losses and optimizes everything with Adam.
//! 6. [`eval`] scores renders and generates synthetic ground-truth scenes.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod deform;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod grid;
pub mod ingest;
pub mod init;
pub mod render;
pub mod train;

pub use deform::{DeformParams, DeformedAttributes};
pub use error::{Error, Result};
pub use gaussian::{CameraModel, Covariance3, Gaussian, GaussianCloud};
pub use grid::{BinaryMask, DepthMap, Grid, RgbImage};
pub use ingest::{Frame, FrameSequence, Split};
pub use render::{RenderOutput, SplatPrimitive};
