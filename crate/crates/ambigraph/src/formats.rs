//! On-disk formats: the JSON detections document, the JSON map output, and
//! the CSV metrics tables. JSON documents carry a `schema_version` field;
//! the CSV headers are fixed contracts.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, CornerSet2D, RigidPose, Rotation};
use crate::harness::{
    ground_truth_label, DetectionDiagnostic, EvaluationReport, Method, SceneGroundTruth,
};
use crate::multigraph::DetectionKey;
use crate::ppe::{ppe_solve_for_image, AmbiguousDetection, PpeError};
use crate::sfm::MarkerMap;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema version {0} (expected {SCHEMA_VERSION})")]
    SchemaVersion(u32),
    #[error("invalid document: {0}")]
    Invalid(String),
    #[error("planar pose estimation failed for image {image_id}, marker {marker_id}: {source}")]
    Ppe { image_id: u32, marker_id: u32, source: PpeError },
    #[error("ground truth block is required for evaluation")]
    MissingGroundTruth,
}

/// A pose as stored on disk: row-major rotation matrix plus translation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRecord {
    pub id: u32,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl PoseRecord {
    pub fn from_pose(id: u32, pose: &RigidPose) -> Self {
        let m = pose.rotation.matrix();
        PoseRecord {
            id,
            rotation: [
                m[(0, 0)],
                m[(0, 1)],
                m[(0, 2)],
                m[(1, 0)],
                m[(1, 1)],
                m[(1, 2)],
                m[(2, 0)],
                m[(2, 1)],
                m[(2, 2)],
            ],
            translation: [pose.translation.x, pose.translation.y, pose.translation.z],
        }
    }

    pub fn to_pose(&self) -> Result<RigidPose, FormatError> {
        let r = &self.rotation;
        let m = Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]);
        let rotation = Rotation::from_matrix(m)
            .map_err(|e| FormatError::Invalid(format!("pose {}: {e}", self.id)))?;
        Ok(RigidPose::new(
            rotation,
            Vector3::new(self.translation[0], self.translation[1], self.translation[2]),
        ))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub marker_id: u32,
    /// 4 ordered corners, pixels.
    pub corners_px: [[f64; 2]; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u32,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthBlock {
    pub markers: Vec<PoseRecord>,
    pub cameras: Vec<PoseRecord>,
}

/// The corner-observation input document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionsFile {
    pub schema_version: u32,
    pub camera: CameraIntrinsics,
    pub marker_size_m: f64,
    pub images: Vec<ImageRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthBlock>,
}

impl DetectionsFile {
    pub fn validate(&self) -> Result<(), FormatError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(FormatError::SchemaVersion(self.schema_version));
        }
        if self.marker_size_m <= 0.0 {
            return Err(FormatError::Invalid("marker_size_m must be positive".into()));
        }
        if self.camera.fx <= 0.0 || self.camera.fy <= 0.0 {
            return Err(FormatError::Invalid("focal lengths must be positive".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for image in &self.images {
            for d in &image.detections {
                if !seen.insert((image.id, d.marker_id)) {
                    return Err(FormatError::Invalid(format!(
                        "duplicate detection of marker {} in image {}",
                        d.marker_id, image.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Collects per-image corner sets from generated detections.
    pub fn from_detections(
        camera: CameraIntrinsics,
        marker_size_m: f64,
        detections: &[AmbiguousDetection],
        ground_truth: Option<&SceneGroundTruth>,
    ) -> Self {
        let mut images: BTreeMap<u32, Vec<DetectionRecord>> = BTreeMap::new();
        for d in detections {
            let pts = d.corners2d.points();
            images.entry(d.image_id).or_default().push(DetectionRecord {
                marker_id: d.marker_id,
                corners_px: [
                    [pts[0].x, pts[0].y],
                    [pts[1].x, pts[1].y],
                    [pts[2].x, pts[2].y],
                    [pts[3].x, pts[3].y],
                ],
            });
        }
        DetectionsFile {
            schema_version: SCHEMA_VERSION,
            camera,
            marker_size_m,
            images: images
                .into_iter()
                .map(|(id, detections)| ImageRecord { id, detections })
                .collect(),
            ground_truth: ground_truth.map(|gt| GroundTruthBlock {
                markers: gt
                    .marker_poses
                    .iter()
                    .map(|(&id, p)| PoseRecord::from_pose(id, p))
                    .collect(),
                cameras: gt
                    .camera_poses
                    .iter()
                    .map(|(&id, p)| PoseRecord::from_pose(id, p))
                    .collect(),
            }),
        }
    }

    /// Runs the two-solution PPE solver on every stored corner set.
    pub fn solve_detections(&self) -> Result<Vec<AmbiguousDetection>, FormatError> {
        let mut out = Vec::new();
        for image in &self.images {
            for d in &image.detections {
                let corners = CornerSet2D([
                    Vector2::new(d.corners_px[0][0], d.corners_px[0][1]),
                    Vector2::new(d.corners_px[1][0], d.corners_px[1][1]),
                    Vector2::new(d.corners_px[2][0], d.corners_px[2][1]),
                    Vector2::new(d.corners_px[3][0], d.corners_px[3][1]),
                ]);
                let spec = crate::ppe::MarkerSpec { id: d.marker_id, size: self.marker_size_m };
                let det = ppe_solve_for_image(image.id, &corners, &spec, &self.camera)
                    .map_err(|source| FormatError::Ppe {
                        image_id: image.id,
                        marker_id: d.marker_id,
                        source,
                    })?;
                out.push(det);
            }
        }
        Ok(out)
    }

    /// Ground-truth poses and recomputed true labels for the given solved
    /// detections.
    pub fn ground_truth_for(
        &self,
        detections: &[AmbiguousDetection],
    ) -> Result<SceneGroundTruth, FormatError> {
        let block = self.ground_truth.as_ref().ok_or(FormatError::MissingGroundTruth)?;
        let mut marker_poses = BTreeMap::new();
        for record in &block.markers {
            marker_poses.insert(record.id, record.to_pose()?);
        }
        let mut camera_poses = BTreeMap::new();
        for record in &block.cameras {
            camera_poses.insert(record.id, record.to_pose()?);
        }
        let mut m2c_poses = BTreeMap::new();
        let mut true_labels = BTreeMap::new();
        for d in detections {
            let key = DetectionKey { image_id: d.image_id, marker_id: d.marker_id };
            let cam = camera_poses.get(&d.image_id).ok_or_else(|| {
                FormatError::Invalid(format!("no ground-truth camera for image {}", d.image_id))
            })?;
            let marker = marker_poses.get(&d.marker_id).ok_or_else(|| {
                FormatError::Invalid(format!("no ground-truth pose for marker {}", d.marker_id))
            })?;
            let m2c = cam.compose(marker);
            true_labels.insert(key, ground_truth_label(d, &m2c.rotation));
            m2c_poses.insert(key, m2c);
        }
        Ok(SceneGroundTruth { marker_poses, camera_poses, m2c_poses, true_labels })
    }
}

/// The reconstructed map document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapFile {
    pub schema_version: u32,
    pub reference_marker: u32,
    pub markers: Vec<PoseRecord>,
    pub cameras: Vec<PoseRecord>,
}

impl MapFile {
    pub fn from_map(map: &MarkerMap) -> Self {
        MapFile {
            schema_version: SCHEMA_VERSION,
            reference_marker: map.reference_marker,
            markers: map
                .marker_poses
                .iter()
                .map(|(&id, p)| PoseRecord::from_pose(id, p))
                .collect(),
            cameras: map
                .camera_poses
                .iter()
                .map(|(&id, p)| PoseRecord::from_pose(id, p))
                .collect(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &std::path::Path, value: &T) -> Result<(), FormatError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_detections(path: &std::path::Path) -> Result<DetectionsFile, FormatError> {
    let text = std::fs::read_to_string(path)?;
    let file: DetectionsFile = serde_json::from_str(&text)?;
    file.validate()?;
    Ok(file)
}

/// Fixed-width significant-digit formatting for the CSV tables (6 digits).
pub fn format_sig(x: f64) -> String {
    if x.is_nan() {
        return "nan".to_string();
    }
    if x == 0.0 {
        return "0.00000".to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (5 - exp).clamp(0, 12) as usize;
    format!("{x:.decimals$}")
}

pub const METRICS_HEADER: &str =
    "method,precision,markers_mapped,cameras_localised,marker_err_deg,marker_err_cm,cam_err_deg,cam_err_cm";

/// The per-method metrics table.
pub fn metrics_csv(report: &EvaluationReport) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in &report.per_method {
        let precision = m.precision.map(format_sig).unwrap_or_else(|| "nan".into());
        let (md, mc, cd, cc) = match &m.errors {
            Some(e) => (
                format_sig(e.marker_rot_deg),
                format_sig(e.marker_pos_cm),
                format_sig(e.camera_rot_deg),
                format_sig(e.camera_pos_cm),
            ),
            None => ("nan".into(), "nan".into(), "nan".into(), "nan".into()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.method.name(),
            precision,
            m.markers_mapped,
            m.cameras_localised,
            md,
            mc,
            cd,
            cc
        ));
    }
    out
}

pub const DECISIONS_HEADER: &str = "image_id,marker_id,decision,error_ratio,weight_ratio";

/// Per-detection decision table for one method. Abstentions print as
/// `discarded`; the weight-ratio column stays empty for methods without
/// indicators.
pub fn decisions_csv(
    decisions: &BTreeMap<DetectionKey, Option<u8>>,
    diagnostics: &[DetectionDiagnostic],
) -> String {
    let diag: BTreeMap<DetectionKey, &DetectionDiagnostic> =
        diagnostics.iter().map(|d| (d.key, d)).collect();
    let mut out = String::from(DECISIONS_HEADER);
    out.push('\n');
    for (key, decision) in decisions {
        let decision_txt = match decision {
            Some(bit) => bit.to_string(),
            None => "discarded".to_string(),
        };
        let (er, wr) = match diag.get(key) {
            Some(d) => (
                format_sig(d.error_ratio),
                d.weight_ratio.map(format_sig).unwrap_or_default(),
            ),
            None => ("nan".into(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            key.image_id, key.marker_id, decision_txt, er, wr
        ));
    }
    out
}

pub const HISTOGRAM_HEADER: &str = "bin_lo,bin_hi,count";

/// 20-bin histogram over [0, 1] in 0.05 steps.
pub fn histogram_csv(values: impl Iterator<Item = f64>) -> String {
    let mut counts = [0usize; 20];
    for v in values {
        let bin = ((v / 0.05) as usize).min(19);
        counts[bin] += 1;
    }
    let mut out = String::from(HISTOGRAM_HEADER);
    out.push('\n');
    for (i, c) in counts.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{}\n",
            format_sig(i as f64 * 0.05),
            format_sig((i + 1) as f64 * 0.05),
            c
        ));
    }
    out
}

/// The trial table produced by the Monte-Carlo driver.
pub const TRIALS_HEADER: &str = "noise_px,seed,method,precision,abstention_rate";

pub fn trials_csv(
    noise: f64,
    trials: &[crate::harness::TrialResult],
    methods: &[Method],
) -> String {
    let mut out = String::from(TRIALS_HEADER);
    out.push('\n');
    for trial in trials {
        for method in methods {
            let precision = trial
                .precision
                .get(method)
                .and_then(|p| *p)
                .map(format_sig)
                .unwrap_or_else(|| "nan".into());
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                format_sig(noise),
                trial.seed,
                method.name(),
                precision,
                format_sig(trial.abstention[method])
            ));
        }
    }
    out
}
