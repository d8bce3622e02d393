//! Sparse 3D curve abstraction of triangle meshes.
//!
//! A small set of cubic Bézier curves is optimized so that, from any sampled
//! viewpoint, its rasterized strokes resemble renders of a target mesh under a
//! perceptual encoder. Curves are held to the surface by a neural distance
//! field, kept inside the frame by a view regularizer, and can be steered
//! toward salient regions through keypoint weight maps. Once optimized, the
//! curves double as deformation handles through distance-based skinning.
//!
//! Module map:
//!
//! * [`geometry`]: meshes, surface sampling, cameras and projection.
//! * [`curves`]: the Bézier curve model and the view (NDC) regularizer.
//! * [`raster`]: differentiable stroke rasterization.
//! * [`sdf`]: exact distance oracle, neural distance field, adherence loss.
//! * [`targets`]: surface and contour supervision renders plus their cache.
//! * [`perception`]: encoder adapters, semantic and patch losses, augmentations.
//! * [`keypoints`]: keypoint detection, weight maps and the localized loss.
//! * [`pipeline`]: the two-stage optimizer, refinement and checkpoints.
//! * [`deform`]: skinning weights and curve-driven mesh deformation.
//! * [`eval`]: coverage and perceptual metrics.

pub mod curves;
pub mod deform;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod keypoints;
pub mod linalg;
pub mod optim;
pub mod perception;
pub mod pipeline;
pub mod raster;
pub mod sdf;
pub mod targets;

pub use error::{Error, Result};

/// Column vector in model space.
pub type Vec3 = nalgebra::Vector3<f64>;
/// Point in normalized image coordinates.
pub type Vec2 = nalgebra::Vector2<f64>;
