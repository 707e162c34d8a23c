//! Sparse query-based multi-person 2D pose estimation.
//!
//! The model regresses a small set of person boxes and their 17 COCO
//! keypoints directly from learnable queries, refined over a cascade of
//! decoder stages, with no dense heatmaps and no non-maximum suppression.
//! Keypoint coordinates are trained under a normalizing-flow likelihood
//! (residual log-likelihood estimation), which also yields per-keypoint
//! uncertainty used in the final pose score.
//!
//! Everything numeric is generic over the [`Scalar`] element type; use
//! `f32` for training speed and `f64` when verifying gradients against
//! finite differences. Concrete aliases for the common instantiations are
//! exported at the crate root.

pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod backbone;
pub mod box_decoder;
pub mod data_eval;
pub mod keypoint_decoder;
pub mod matching;
pub mod nn;
pub mod pipeline;
pub mod rle_flow;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
