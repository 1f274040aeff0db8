//! Deformable-mesh reconstruction from annotated 2D image collections.
//!
//! Given a set of images annotated with foreground masks and sparse semantic
//! keypoints, this crate learns a category-level deformable mesh model (a
//! shared mean shape, a keypoint-to-vertex assignment, and per-instance
//! deformations, weak-perspective cameras, and textures) by directly
//! minimizing a reprojection / mask / regularization objective. Trained
//! models can be fitted to novel annotated images, analyzed with PCA over
//! deformations, and rendered (including texture transfer across instances).
//!
//! The crate is organized along the pipeline:
//!
//! - [`geom`]: icosphere topology, mirror-symmetric shape parameterization,
//!   cotangent Laplacian, convex hull and hull-based mean shape init.
//! - [`camera`]: weak-perspective cameras, keypoint structure-from-motion,
//!   similarity alignment.
//! - [`render`]: differentiable soft silhouette rasterization plus hard
//!   z-buffered rasterization for textured output.
//! - [`texture`]: spherical UV atlas, bilinear sampling, texture flow, and
//!   exact Euclidean distance transforms.
//! - [`objective`]: the loss terms and their analytic gradients.
//! - [`fit`]: collection training, single-instance fitting, deformation PCA,
//!   texture transfer, checkpointing.
//! - [`io`]: dataset manifests, PNM image IO, synthetic dataset generation,
//!   OBJ export, and evaluation metrics.
//!
//! With the default `parallel` feature, batch evaluation and rasterization
//! fan out over rayon; disabling the feature compiles the same code paths
//! sequentially. Results are bit-identical either way: every parallel
//! reduction happens in a fixed order.

pub mod camera;
pub mod error;
pub mod fit;
pub mod geom;
pub mod grid;
pub mod io;
pub mod objective;
pub mod par;
pub mod render;
pub mod texture;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
