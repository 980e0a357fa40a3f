//! Marker-based SfM back-end: pose-graph initialization of the marker poses,
//! camera initialization by single pose averaging, and joint bundle
//! adjustment over the observed marker corners.
//!
//! Conventions: marker poses map marker frame -> world, camera poses map
//! world -> camera, and the world frame is anchored to the reference marker
//! (smallest id), whose pose is the identity.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix3x6, Matrix6, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::geometry::{nearest_rotation, skew, CameraIntrinsics, RigidPose, Rotation};
use crate::ppe::{canonical_corners, MarkerSpec};
use crate::selection::ResolvedDetection;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SfmError {
    #[error("resolved detections do not connect all markers; components: {0:?}")]
    DisconnectedGraph(Vec<Vec<u32>>),
    #[error("image {0} observes no mapped marker")]
    UnobservedImage(u32),
    #[error("no detections to reconstruct from")]
    Empty,
    #[error("marker {0} has no size specification")]
    MissingSpec(u32),
}

/// Absolute marker and camera poses with the gauge anchor.
#[derive(Debug, Clone)]
pub struct MarkerMap {
    /// Marker -> world poses.
    pub marker_poses: BTreeMap<u32, RigidPose>,
    /// World -> camera poses.
    pub camera_poses: BTreeMap<u32, RigidPose>,
    /// Gauge anchor; its pose is the identity.
    pub reference_marker: u32,
}

/// Pose-graph stage output: marker poses plus the refinement trace.
#[derive(Debug, Clone)]
pub struct PoseGraphResult {
    pub marker_poses: BTreeMap<u32, RigidPose>,
    pub reference_marker: u32,
    /// Robust objective after every sweep; non-increasing.
    pub trace: Vec<f64>,
}

/// One marker-to-marker relative pose measurement derived from a pair of
/// resolved detections in the same image.
struct RelativeMeasure {
    i: u32,
    j: u32,
    /// marker_i -> marker_j.
    pose: RigidPose,
    /// Combined reprojection error of the two endpoint selections.
    weight: f64,
}

fn relative_measures(resolved: &[ResolvedDetection]) -> Vec<RelativeMeasure> {
    let mut by_image: BTreeMap<u32, Vec<&ResolvedDetection>> = BTreeMap::new();
    for r in resolved {
        by_image.entry(r.image_id).or_default().push(r);
    }
    let mut measures = Vec::new();
    for list in by_image.values() {
        let mut sorted: Vec<&&ResolvedDetection> = list.iter().collect();
        sorted.sort_by_key(|r| r.marker_id);
        for (x, ri) in sorted.iter().enumerate() {
            for rj in &sorted[x + 1..] {
                measures.push(RelativeMeasure {
                    i: ri.marker_id,
                    j: rj.marker_id,
                    pose: rj.pose.inverse().compose(&ri.pose),
                    weight: ri.error + rj.error,
                });
            }
        }
    }
    measures
}

fn marker_components(markers: &[u32], measures: &[RelativeMeasure]) -> Vec<Vec<u32>> {
    let index: BTreeMap<u32, usize> = markers.iter().enumerate().map(|(k, &m)| (m, k)).collect();
    let mut parent: Vec<usize> = (0..markers.len()).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        let mut root = x;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = x;
        while parent[cur] != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }
    for m in measures {
        let (a, b) = (find(&mut parent, index[&m.i]), find(&mut parent, index[&m.j]));
        if a != b {
            parent[a] = b;
        }
    }
    let mut groups: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for (k, &m) in markers.iter().enumerate() {
        groups.entry(find(&mut parent, k)).or_default().push(m);
    }
    groups.into_values().collect()
}

const HUBER_SCALE: f64 = 0.1;
const TRANSLATION_WEIGHT: f64 = 1.0;

fn huber_rho(r: f64) -> f64 {
    if r <= HUBER_SCALE {
        0.5 * r * r
    } else {
        HUBER_SCALE * (r - 0.5 * HUBER_SCALE)
    }
}

fn huber_weight(r: f64) -> f64 {
    if r <= HUBER_SCALE {
        0.5
    } else {
        0.5 * HUBER_SCALE / r
    }
}

/// Initializes absolute marker poses from the resolved detections: rotations
/// come from the lifted averaging output, translations from spanning-tree
/// chaining, and a robust pose-graph refinement polishes both.
pub fn marker_pose_graph_init(
    resolved: &[ResolvedDetection],
    lifted_rotations: &BTreeMap<u32, Rotation>,
) -> Result<PoseGraphResult, SfmError> {
    if resolved.is_empty() {
        return Err(SfmError::Empty);
    }
    let mut markers: Vec<u32> = resolved.iter().map(|r| r.marker_id).collect();
    markers.sort_unstable();
    markers.dedup();
    let measures = relative_measures(resolved);
    let components = marker_components(&markers, &measures);
    if components.len() > 1 {
        return Err(SfmError::DisconnectedGraph(components));
    }
    let reference = markers[0];

    // rotations from the averaging solution: solver convention has
    // measurement ~ R_j R_i^T, so marker->world rotations are
    // abs_ref * abs_i^T (identity at the reference).
    let abs_ref = lifted_rotations[&reference];
    let mut poses: BTreeMap<u32, RigidPose> = markers
        .iter()
        .map(|&m| {
            let rot = abs_ref.compose(&lifted_rotations[&m].transpose());
            (m, RigidPose::new(rot, Vector3::zeros()))
        })
        .collect();

    // translations: chain along the minimum-weight spanning tree
    let index: BTreeMap<u32, usize> = markers.iter().enumerate().map(|(k, &m)| (m, k)).collect();
    let mut order: Vec<usize> = (0..measures.len()).collect();
    order.sort_by(|&a, &b| {
        measures[a]
            .weight
            .partial_cmp(&measures[b].weight)
            .unwrap()
            .then_with(|| (measures[a].i, measures[a].j).cmp(&(measures[b].i, measures[b].j)))
    });
    let mut parent: Vec<usize> = (0..markers.len()).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        let mut root = x;
        while parent[root] != root {
            root = parent[root];
        }
        root
    }
    let mut adjacency: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for idx in order {
        let m = &measures[idx];
        let (a, b) = (find(&mut parent, index[&m.i]), find(&mut parent, index[&m.j]));
        if a != b {
            parent[a] = b;
            adjacency.entry(m.i).or_default().push(idx);
            adjacency.entry(m.j).or_default().push(idx);
        }
    }
    let mut known: BTreeMap<u32, bool> = markers.iter().map(|&m| (m, m == reference)).collect();
    let mut stack = vec![reference];
    while let Some(v) = stack.pop() {
        let Some(edges) = adjacency.get(&v) else { continue };
        for &idx in edges.clone().iter() {
            let m = &measures[idx];
            let other = if m.i == v { m.j } else { m.i };
            if known[&other] {
                continue;
            }
            let pv = poses[&v];
            let t_new = if m.i == v {
                // p_j = p_i o rel^{-1}
                pv.compose(&m.pose.inverse()).translation
            } else {
                // p_i = p_j o rel
                pv.compose(&m.pose).translation
            };
            let entry = poses.get_mut(&other).unwrap();
            entry.translation = t_new;
            known.insert(other, true);
            stack.push(other);
        }
    }

    // robust joint refinement over all relative measurements
    let residual = |poses: &BTreeMap<u32, RigidPose>, m: &RelativeMeasure| -> f64 {
        let (pi, pj) = (&poses[&m.i], &poses[&m.j]);
        let rot_pred = pj.rotation.transpose().compose(&pi.rotation);
        let t_pred = pj.rotation.transpose().rotate(&(pi.translation - pj.translation));
        let r_rot = (m.pose.rotation.matrix() - rot_pred.matrix()).norm_squared();
        let r_tr = (m.pose.translation - t_pred).norm_squared();
        (r_rot + TRANSLATION_WEIGHT * r_tr).sqrt()
    };
    let objective = |poses: &BTreeMap<u32, RigidPose>| -> f64 {
        measures.iter().map(|m| huber_rho(residual(poses, m))).sum()
    };

    let mut trace = vec![objective(&poses)];
    for _ in 0..200 {
        let weights: Vec<f64> =
            measures.iter().map(|m| huber_weight(residual(&poses, m))).collect();
        // rotation sweep (closed-form per vertex)
        for &v in &markers {
            if v == reference {
                continue;
            }
            let mut target = Matrix3::<f64>::zeros();
            for (m, &w) in measures.iter().zip(weights.iter()) {
                if m.i == v {
                    // || R~ - R_j^T R_i ||^2 = || R_j R~ - R_i ||^2
                    target += poses[&m.j].rotation.matrix() * m.pose.rotation.matrix() * w;
                } else if m.j == v {
                    // || R~ - R_j^T R_i ||^2 = || R_i R~^T - R_j ||^2
                    target +=
                        poses[&m.i].rotation.matrix() * m.pose.rotation.matrix().transpose() * w;
                    // translation residual seen from the j side:
                    // || R_j t~ - (t_i - t_j) ||^2 adds a Wahba-style term
                    let d = poses[&m.i].translation - poses[&m.j].translation;
                    target += d * m.pose.translation.transpose() * (w * TRANSLATION_WEIGHT);
                }
            }
            if let Ok(r) = nearest_rotation(&target) {
                poses.get_mut(&v).unwrap().rotation = r;
            }
        }
        // translation sweep (weighted mean per vertex)
        for &v in &markers {
            if v == reference {
                continue;
            }
            let mut acc = Vector3::zeros();
            let mut total = 0.0;
            for (m, &w) in measures.iter().zip(weights.iter()) {
                let wt = w * TRANSLATION_WEIGHT;
                if m.i == v {
                    // t_i ~ R_j t~ + t_j
                    acc += (poses[&m.j].rotation.rotate(&m.pose.translation)
                        + poses[&m.j].translation)
                        * wt;
                    total += wt;
                } else if m.j == v {
                    // t_j ~ t_i - R_j t~
                    acc += (poses[&m.i].translation
                        - poses[&v].rotation.rotate(&m.pose.translation))
                        * wt;
                    total += wt;
                }
            }
            if total > 0.0 {
                poses.get_mut(&v).unwrap().translation = acc / total;
            }
        }
        let value = objective(&poses);
        let last = *trace.last().unwrap();
        if value > last {
            // floating-point wobble at convergence; stop without recording
            break;
        }
        trace.push(value);
        if last - value <= 1e-14 * last.max(1.0) {
            break;
        }
    }

    Ok(PoseGraphResult { marker_poses: poses, reference_marker: reference, trace })
}

/// Initializes every camera pose by single pose averaging of the estimates
/// implied by each resolved detection of a mapped marker: rotations through
/// the chordal (projected-mean) average, translations by the arithmetic mean.
pub fn camera_init_single_pose_averaging(
    resolved: &[ResolvedDetection],
    marker_poses: &BTreeMap<u32, RigidPose>,
) -> Result<BTreeMap<u32, RigidPose>, SfmError> {
    let mut by_image: BTreeMap<u32, Vec<&ResolvedDetection>> = BTreeMap::new();
    for r in resolved {
        by_image.entry(r.image_id).or_default().push(r);
    }
    let mut cameras = BTreeMap::new();
    for (&t, list) in &by_image {
        let mut rot_sum = Matrix3::<f64>::zeros();
        let mut t_sum = Vector3::zeros();
        let mut count = 0.0;
        for r in list {
            let Some(marker) = marker_poses.get(&r.marker_id) else { continue };
            // world -> camera estimate from this detection
            let estimate = r.pose.compose(&marker.inverse());
            rot_sum += estimate.rotation.matrix();
            t_sum += estimate.translation;
            count += 1.0;
        }
        if count == 0.0 {
            return Err(SfmError::UnobservedImage(t));
        }
        let rotation = nearest_rotation(&rot_sum).map_err(|_| SfmError::UnobservedImage(t))?;
        cameras.insert(t, RigidPose::new(rotation, t_sum / count));
    }
    Ok(cameras)
}

/// Bundle-adjustment outcome diagnostics.
#[derive(Debug, Clone)]
pub struct BaReport {
    pub initial_error: f64,
    pub final_error: f64,
    /// Total squared corner error after every accepted step; non-increasing.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl BaReport {
    /// Root-mean-square residual per corner coordinate.
    pub fn rms_px(&self, n_detections: usize) -> f64 {
        if n_detections == 0 {
            return 0.0;
        }
        (self.final_error / (8.0 * n_detections as f64)).sqrt()
    }
}

struct BaProblem<'a> {
    detections: &'a [ResolvedDetection],
    corners: Vec<[Vector3<f64>; 4]>,
    marker_ids: Vec<u32>,
    camera_ids: Vec<u32>,
    marker_index: BTreeMap<u32, usize>,
    camera_index: BTreeMap<u32, usize>,
    reference_marker: u32,
}

fn total_error(
    p: &BaProblem,
    k: &CameraIntrinsics,
    markers: &[RigidPose],
    cameras: &[RigidPose],
) -> f64 {
    let mut total = 0.0;
    for (d, corners) in p.detections.iter().zip(p.corners.iter()) {
        let pose =
            cameras[p.camera_index[&d.image_id]].compose(&markers[p.marker_index[&d.marker_id]]);
        for (c, u) in corners.iter().zip(d.detection.corners2d.points()) {
            let x = pose.transform(c);
            if x.z <= 1e-12 {
                return f64::INFINITY;
            }
            let proj = k.apply(&Vector2::new(x.x / x.z, x.y / x.z));
            total += (proj - u).norm_squared();
        }
    }
    total
}

/// Joint refinement of all marker and camera poses by damped Gauss-Newton on
/// the corner reprojection error, with the camera blocks eliminated through
/// the Schur complement. The reference marker stays fixed.
pub fn bundle_adjust(
    map: &MarkerMap,
    resolved: &[ResolvedDetection],
    specs: &BTreeMap<u32, MarkerSpec>,
    k: &CameraIntrinsics,
    max_iterations: usize,
) -> Result<(MarkerMap, BaReport), SfmError> {
    if resolved.is_empty() {
        return Err(SfmError::Empty);
    }
    let mut corners = Vec::with_capacity(resolved.len());
    for d in resolved {
        let spec = specs.get(&d.marker_id).ok_or(SfmError::MissingSpec(d.marker_id))?;
        corners.push(*canonical_corners(spec).points());
    }
    let marker_ids: Vec<u32> = map.marker_poses.keys().copied().collect();
    let camera_ids: Vec<u32> = map.camera_poses.keys().copied().collect();
    let p = BaProblem {
        detections: resolved,
        corners,
        marker_index: marker_ids.iter().enumerate().map(|(x, &m)| (m, x)).collect(),
        camera_index: camera_ids.iter().enumerate().map(|(x, &c)| (c, x)).collect(),
        marker_ids,
        camera_ids,
        reference_marker: map.reference_marker,
    };
    let mut markers: Vec<RigidPose> = p.marker_ids.iter().map(|m| map.marker_poses[m]).collect();
    let mut cameras: Vec<RigidPose> = p.camera_ids.iter().map(|c| map.camera_poses[c]).collect();

    // free marker parameter slots (reference excluded)
    let free_markers: Vec<usize> = (0..p.marker_ids.len())
        .filter(|&x| p.marker_ids[x] != p.reference_marker)
        .collect();
    let marker_slot: BTreeMap<usize, usize> =
        free_markers.iter().enumerate().map(|(slot, &x)| (x, slot)).collect();
    let n_m = free_markers.len() * 6;
    let n_c = p.camera_ids.len();

    let mut error = total_error(&p, k, &markers, &cameras);
    let initial_error = error;
    let mut trace = vec![error];
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..max_iterations {
        iterations += 1;
        // assemble normal equations
        let mut h_mm = DMatrix::<f64>::zeros(n_m, n_m);
        let mut g_m = DVector::<f64>::zeros(n_m);
        let mut h_cc: Vec<Matrix6<f64>> = vec![Matrix6::zeros(); n_c];
        let mut g_c: Vec<Vector6<f64>> = vec![Vector6::zeros(); n_c];
        let mut h_mc: BTreeMap<(usize, usize), Matrix6<f64>> = BTreeMap::new();

        for (d, corners) in p.detections.iter().zip(p.corners.iter()) {
            let mi = p.marker_index[&d.marker_id];
            let ci = p.camera_index[&d.image_id];
            let cam = &cameras[ci];
            let marker = &markers[mi];
            let mut j_m = nalgebra::SMatrix::<f64, 8, 6>::zeros();
            let mut j_c = nalgebra::SMatrix::<f64, 8, 6>::zeros();
            let mut res = nalgebra::SVector::<f64, 8>::zeros();
            for (ci_corner, (c, u)) in corners.iter().zip(d.detection.corners2d.points()).enumerate()
            {
                let in_marker = marker.rotation.rotate(c);
                let x_world = in_marker + marker.translation;
                let x = cam.transform(&x_world);
                if x.z <= 1e-12 {
                    continue;
                }
                let inv_z = 1.0 / x.z;
                let proj = k.apply(&Vector2::new(x.x * inv_z, x.y * inv_z));
                let e = proj - u;
                let de_dx = Matrix2x3::new(
                    k.fx * inv_z,
                    k.skew * inv_z,
                    -(k.fx * x.x + k.skew * x.y) * inv_z * inv_z,
                    0.0,
                    k.fy * inv_z,
                    -k.fy * x.y * inv_z * inv_z,
                );
                // camera: left-perturbed rotation, additive translation
                let mut dx_dc = Matrix3x6::<f64>::zeros();
                dx_dc.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(x - cam.translation)));
                dx_dc.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
                // marker: perturbation mapped through the camera rotation
                let mut dx_dm = Matrix3x6::<f64>::zeros();
                dx_dm
                    .fixed_view_mut::<3, 3>(0, 0)
                    .copy_from(&(cam.rotation.matrix() * (-skew(in_marker))));
                dx_dm.fixed_view_mut::<3, 3>(0, 3).copy_from(cam.rotation.matrix());
                let row = ci_corner * 2;
                j_c.fixed_view_mut::<2, 6>(row, 0).copy_from(&(de_dx * dx_dc));
                j_m.fixed_view_mut::<2, 6>(row, 0).copy_from(&(de_dx * dx_dm));
                res.fixed_rows_mut::<2>(row).copy_from(&e);
            }
            h_cc[ci] += j_c.transpose() * j_c;
            g_c[ci] += j_c.transpose() * res;
            if let Some(&slot) = marker_slot.get(&mi) {
                let base = slot * 6;
                let block = j_m.transpose() * j_m;
                for r in 0..6 {
                    for c2 in 0..6 {
                        h_mm[(base + r, base + c2)] += block[(r, c2)];
                    }
                }
                let gm = j_m.transpose() * res;
                for r in 0..6 {
                    g_m[base + r] += gm[r];
                }
                *h_mc.entry((slot, ci)).or_insert_with(Matrix6::zeros) +=
                    j_m.transpose() * j_c;
            }
        }

        let g_inf = g_m
            .iter()
            .map(|v| v.abs())
            .chain(g_c.iter().flat_map(|v| v.iter().map(|x| x.abs())))
            .fold(0.0f64, f64::max);
        if g_inf < 1e-10 {
            converged = true;
            break;
        }

        let mut accepted = false;
        for _ in 0..10 {
            // damp
            let mut h_mm_d = h_mm.clone();
            for d in 0..n_m {
                h_mm_d[(d, d)] += lambda * h_mm[(d, d)].max(1e-12);
            }
            let mut h_cc_inv: Vec<Matrix6<f64>> = Vec::with_capacity(n_c);
            let mut ok = true;
            for block in &h_cc {
                let mut damped = *block;
                for d in 0..6 {
                    damped[(d, d)] += lambda * block[(d, d)].max(1e-12);
                }
                match damped.try_inverse() {
                    Some(inv) => h_cc_inv.push(inv),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                lambda *= 10.0;
                continue;
            }
            // Schur complement over cameras
            let mut s = h_mm_d.clone();
            let mut rhs = g_m.clone();
            let mut by_camera: Vec<Vec<(usize, &Matrix6<f64>)>> = vec![Vec::new(); n_c];
            for (&(slot, ci), block) in &h_mc {
                by_camera[ci].push((slot, block));
            }
            for ci in 0..n_c {
                let inv = &h_cc_inv[ci];
                for &(slot_a, block_a) in &by_camera[ci] {
                    let left = block_a * inv;
                    let corr = left * g_c[ci];
                    for r in 0..6 {
                        rhs[slot_a * 6 + r] -= corr[r];
                    }
                    for &(slot_b, block_b) in &by_camera[ci] {
                        let prod = left * block_b.transpose();
                        for r in 0..6 {
                            for c2 in 0..6 {
                                s[(slot_a * 6 + r, slot_b * 6 + c2)] -= prod[(r, c2)];
                            }
                        }
                    }
                }
            }
            let Some(delta_m) = s.lu().solve(&(-&rhs)) else {
                lambda *= 10.0;
                continue;
            };
            // back-substitute cameras
            let mut delta_c: Vec<Vector6<f64>> = Vec::with_capacity(n_c);
            for ci in 0..n_c {
                let mut rhs_c = -g_c[ci];
                for &(slot, block) in &by_camera[ci] {
                    let dm = Vector6::from_fn(|r, _| delta_m[slot * 6 + r]);
                    rhs_c -= block.transpose() * dm;
                }
                delta_c.push(h_cc_inv[ci] * rhs_c);
            }
            // apply
            let mut new_markers = markers.clone();
            for (&x, &slot) in &marker_slot {
                let w = Vector3::new(delta_m[slot * 6], delta_m[slot * 6 + 1], delta_m[slot * 6 + 2]);
                let v = Vector3::new(
                    delta_m[slot * 6 + 3],
                    delta_m[slot * 6 + 4],
                    delta_m[slot * 6 + 5],
                );
                new_markers[x] = RigidPose::new(
                    new_markers[x].rotation.retract(w),
                    new_markers[x].translation + v,
                );
            }
            let mut new_cameras = cameras.clone();
            for ci in 0..n_c {
                let d = &delta_c[ci];
                let w = Vector3::new(d[0], d[1], d[2]);
                let v = Vector3::new(d[3], d[4], d[5]);
                new_cameras[ci] = RigidPose::new(
                    new_cameras[ci].rotation.retract(w),
                    new_cameras[ci].translation + v,
                );
            }
            let new_error = total_error(&p, k, &new_markers, &new_cameras);
            if new_error < error {
                let rel_drop = (error - new_error) / error.max(1e-300);
                markers = new_markers;
                cameras = new_cameras;
                error = new_error;
                trace.push(error);
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                if rel_drop < 1e-13 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
        if !accepted {
            converged = true; // no descent direction left at any damping
            break;
        }
        if converged {
            break;
        }
    }

    let out = MarkerMap {
        marker_poses: p.marker_ids.iter().copied().zip(markers).collect(),
        camera_poses: p.camera_ids.iter().copied().zip(cameras).collect(),
        reference_marker: p.reference_marker,
    };
    let report =
        BaReport { initial_error, final_error: error, trace, iterations, converged };
    Ok((out, report))
}

/// Full back-end: pose-graph init, camera init, bundle adjustment.
pub fn run_sfm(
    resolved: &[ResolvedDetection],
    lifted_rotations: &BTreeMap<u32, Rotation>,
    specs: &BTreeMap<u32, MarkerSpec>,
    k: &CameraIntrinsics,
) -> Result<(MarkerMap, PoseGraphResult, BaReport), SfmError> {
    let pg = marker_pose_graph_init(resolved, lifted_rotations)?;
    let cameras = camera_init_single_pose_averaging(resolved, &pg.marker_poses)?;
    let map = MarkerMap {
        marker_poses: pg.marker_poses.clone(),
        camera_poses: cameras,
        reference_marker: pg.reference_marker,
    };
    let (map, report) = bundle_adjust(&map, resolved, specs, k, 100)?;
    Ok((map, pg, report))
}
