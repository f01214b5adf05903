//! Automatic calibration of tracked ultrasound probes from two sweeps over a
//! nine-cone phantom.
//!
//! The pipeline segments every frame, detects and tracks cone tips, matches
//! tips across the two sweeps by height, estimates the rigid calibration by
//! constrained least squares inside RANSAC, and refines it by maximizing the
//! normalized cross-correlation between frames of one sweep and in-plane
//! reconstructions from the other.

pub mod error;
pub mod eval;
pub mod geom;
pub mod keyval;
pub mod phantom;
pub mod pipeline;
pub mod raster;
pub mod refine;
pub mod rng;
pub mod segment;
pub mod simulate;
pub mod solve;
pub mod sweep;
pub mod track;

pub use error::{Error, Result};
pub use geom::{ImagePoint, RigidTransform};
