//! Multi-view disambiguation of planar-marker pose ambiguity, and the
//! marker-based SfM pipeline built on top of it.
//!
//! Planar pose estimation from 4 marker corners admits two physically
//! plausible solutions when perspective effects are weak. This crate resolves
//! the ambiguity jointly across views instead of per detection:
//!
//! 1. [`ppe`] recovers both pose hypotheses per detection.
//! 2. [`multigraph`] assembles the labelled relative-rotation multigraph over
//!    markers (four parallel edges per covisible pair per image).
//! 3. [`averaging`] solves the lifted clique-constrained rotation averaging
//!    problem over that multigraph.
//! 4. [`selection`] converts the optimised indicators into one pose per
//!    detection through exact per-image maximum-weighted-clique search.
//! 5. [`sfm`] initialises marker and camera poses from the resolved
//!    detections and refines everything by bundle adjustment.
//! 6. [`harness`] generates synthetic scenes with ground truth and evaluates
//!    the method against reference baselines; [`cli`] exposes the whole
//!    pipeline for batch use.

pub mod averaging;
pub mod cli;
pub mod formats;
pub mod geometry;
pub mod harness;
pub mod multigraph;
pub mod ppe;
pub mod selection;
pub mod sfm;
#[cfg(test)]
pub(crate) mod testutil;

pub use geometry::{CameraIntrinsics, CornerSet2D, CornerSet3D, RigidPose, Rotation};
pub use ppe::{AmbiguousDetection, MarkerSpec};
