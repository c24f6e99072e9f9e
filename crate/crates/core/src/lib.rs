//! Desk-scale laboratory for moving-object detection on fisheye cameras.
//!
//! The crate covers the full pipeline: fisheye/rectilinear camera geometry,
//! LiDAR-driven semi-automatic mask annotation, deterministic synthetic scene
//! generation, an f64 reverse-mode tensor core, the two-stream segmentation
//! network, training, and evaluation. Everything is deterministic for a fixed
//! seed; no threads, no global state.

pub mod annotation;
pub mod eval;
pub mod geometry;
pub mod mask;
pub mod model;
pub mod raster;
pub mod synth;
pub mod tensor;
pub mod train;
