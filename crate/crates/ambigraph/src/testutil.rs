//! Shared builders for synthetic rotation-level test scenes (no projection
//! involved; corner fields are fillers). Ground-truth rotations are expressed
//! in the solver's convention: measurements approximate `R_j * R_i^T`.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use rand::Rng;

use crate::geometry::{CornerSet2D, RigidPose, Rotation};
use crate::multigraph::DetectionKey;
use crate::ppe::AmbiguousDetection;

pub(crate) fn random_rotation(rng: &mut impl Rng) -> Rotation {
    let axis = Vector3::new(
        rng.random::<f64>() - 0.5,
        rng.random::<f64>() - 0.5,
        rng.random::<f64>() - 0.5,
    );
    let angle = rng.random::<f64>() * std::f64::consts::PI * 2.0 - std::f64::consts::PI;
    let n = axis.norm();
    if n < 1e-9 {
        return Rotation::identity();
    }
    Rotation::from_axis_angle(axis / n * angle)
}

pub(crate) fn dummy_corners() -> CornerSet2D {
    CornerSet2D([
        Vector2::new(0.0, 0.0),
        Vector2::new(1.0, 0.0),
        Vector2::new(1.0, 1.0),
        Vector2::new(0.0, 1.0),
    ])
}

/// Detection with explicit hypothesis rotations and errors (shared dummy
/// translation, as the ambiguity model requires).
pub(crate) fn synthetic_detection(
    image_id: u32,
    marker_id: u32,
    r0: Rotation,
    r1: Rotation,
    err0: f64,
    err1: f64,
) -> AmbiguousDetection {
    let t = Vector3::new(0.0, 0.0, 2.0);
    AmbiguousDetection::new(
        image_id,
        marker_id,
        dummy_corners(),
        RigidPose::new(r0, t),
        RigidPose::new(r1, t),
        err0,
        err1,
    )
    .unwrap()
}

/// Noiseless scene where hypothesis 0 is always true and hypothesis 1 is an
/// unrelated random rotation. Returns (ground-truth absolute rotations,
/// detections).
pub(crate) fn synthetic_scene(
    rng: &mut impl Rng,
    n_markers: u32,
    images: &[Vec<u32>],
) -> (BTreeMap<u32, Rotation>, Vec<AmbiguousDetection>) {
    let mut truth = BTreeMap::new();
    for m in 0..n_markers {
        truth.insert(m, random_rotation(rng));
    }
    let mut detections = Vec::new();
    for (t, markers) in images.iter().enumerate() {
        let cam = random_rotation(rng);
        for &m in markers {
            // R~_i = cam * R_i^T makes (R~_j)^T R~_i = R_j R_i^T
            let r0 = cam.compose(&truth[&m].transpose());
            let r1 = r0.compose(&random_rotation(rng));
            detections.push(synthetic_detection(t as u32, m, r0, r1, 0.1, 0.7));
        }
    }
    (truth, detections)
}

/// Scene with exact global flip symmetry: hypothesis 1 composes hypothesis 0
/// with a fixed per-marker rotation, so flipping every label is consistent
/// with the alternative absolute rotations.
pub(crate) fn reflected_scene(
    rng: &mut impl Rng,
    n_markers: u32,
    images: &[Vec<u32>],
) -> (BTreeMap<u32, Rotation>, Vec<AmbiguousDetection>) {
    let mut truth = BTreeMap::new();
    let mut twists = BTreeMap::new();
    for m in 0..n_markers {
        truth.insert(m, random_rotation(rng));
        twists.insert(m, random_rotation(rng));
    }
    let mut detections = Vec::new();
    for (t, markers) in images.iter().enumerate() {
        let cam = random_rotation(rng);
        for &m in markers {
            let r0 = cam.compose(&truth[&m].transpose());
            let r1 = r0.compose(&twists[&m]);
            detections.push(synthetic_detection(t as u32, m, r0, r1, 0.1, 0.7));
        }
    }
    (truth, detections)
}

/// Noiseless scene where a fraction of detections store the true rotation in
/// slot 1 (so the lower-error slot is the wrong hypothesis). Returns the true
/// label per detection and the detections.
pub(crate) fn scene_with_wrong_orderings(
    rng: &mut impl Rng,
    n_markers: u32,
    images: &[Vec<u32>],
    wrong_fraction: f64,
) -> (BTreeMap<DetectionKey, u8>, Vec<AmbiguousDetection>) {
    let mut truth = BTreeMap::new();
    for m in 0..n_markers {
        truth.insert(m, random_rotation(rng));
    }
    let mut labels = BTreeMap::new();
    let mut detections = Vec::new();
    for (t, markers) in images.iter().enumerate() {
        let cam = random_rotation(rng);
        for &m in markers {
            let true_rot = cam.compose(&truth[&m].transpose());
            let false_rot = true_rot.compose(&random_rotation(rng));
            let key = DetectionKey { image_id: t as u32, marker_id: m };
            if rng.random::<f64>() < wrong_fraction {
                labels.insert(key, 1);
                detections.push(synthetic_detection(t as u32, m, false_rot, true_rot, 0.1, 0.12));
            } else {
                labels.insert(key, 0);
                detections.push(synthetic_detection(t as u32, m, true_rot, false_rot, 0.1, 0.7));
            }
        }
    }
    (labels, detections)
}
