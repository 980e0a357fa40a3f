//! Planar pose estimation from 4 marker corners, returning **both**
//! physically plausible solutions.
//!
//! The solver decomposes the corner homography through its first-order
//! approximation at the marker center, which yields the two mirror rotations
//! analytically, then polishes each hypothesis with damped Gauss-Newton on
//! the full-perspective reprojection error so that each returned pose is a
//! genuine local minimum. The two hypotheses share a translation: the
//! ambiguity lives entirely in the orientation.

use nalgebra::{DMatrix, Matrix2, Matrix3, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{
    angular_difference_deg, project, reprojection_error, skew, CameraIntrinsics, CornerSet2D,
    CornerSet3D, GeometryError, RigidPose, Rotation,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PpeError {
    #[error("degenerate corner configuration (collinear or repeated points)")]
    DegenerateCorners,
    #[error("no pose with all corners in front of the camera")]
    PlaneBehindCamera,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A physical marker: integer id and side length in meters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MarkerSpec {
    pub id: u32,
    pub size: f64,
}

/// One marker seen in one image, with its two pose hypotheses.
///
/// `pose0` is always the hypothesis with the lower reprojection error, and
/// both hypotheses carry the same translation.
#[derive(Debug, Clone)]
pub struct AmbiguousDetection {
    pub image_id: u32,
    pub marker_id: u32,
    pub corners2d: CornerSet2D,
    pub pose0: RigidPose,
    pub pose1: RigidPose,
    pub err0: f64,
    pub err1: f64,
}

impl AmbiguousDetection {
    /// Validates the structural invariants: shared translation and error
    /// ordering.
    pub fn new(
        image_id: u32,
        marker_id: u32,
        corners2d: CornerSet2D,
        pose0: RigidPose,
        pose1: RigidPose,
        err0: f64,
        err1: f64,
    ) -> Result<Self, PpeError> {
        if pose0.translation != pose1.translation {
            return Err(PpeError::Geometry(GeometryError::InvalidCorners(
                "hypotheses must share a translation",
            )));
        }
        if err0 > err1 {
            return Err(PpeError::Geometry(GeometryError::InvalidCorners(
                "hypothesis 0 must have the lower reprojection error",
            )));
        }
        Ok(AmbiguousDetection { image_id, marker_id, corners2d, pose0, pose1, err0, err1 })
    }

    pub fn rotation(&self, hypothesis: u8) -> &Rotation {
        if hypothesis == 0 {
            &self.pose0.rotation
        } else {
            &self.pose1.rotation
        }
    }

    pub fn pose(&self, hypothesis: u8) -> &RigidPose {
        if hypothesis == 0 {
            &self.pose0
        } else {
            &self.pose1
        }
    }

    pub fn error(&self, hypothesis: u8) -> f64 {
        if hypothesis == 0 {
            self.err0
        } else {
            self.err1
        }
    }

    /// Ratio of the two hypothesis errors (1 = fully ambiguous).
    pub fn error_ratio(&self) -> f64 {
        crate::geometry::error_ratio(self.err0, self.err1)
    }
}

/// The 4 marker corners (+-size/2, +-size/2, 0) in counter-clockwise order
/// starting top-left, centroid at the origin.
pub fn canonical_corners(spec: &MarkerSpec) -> CornerSet3D {
    let h = spec.size * 0.5;
    CornerSet3D::new([
        Vector3::new(-h, h, 0.0),
        Vector3::new(h, h, 0.0),
        Vector3::new(h, -h, 0.0),
        Vector3::new(-h, -h, 0.0),
    ])
    .expect("canonical corners always satisfy the corner-set invariants")
}

/// Exact homography (plane -> normalized image) from the 4 correspondences,
/// via the DLT nullspace. Fails when the corners are (near-)degenerate.
fn homography_from_corners(
    corners3d: &CornerSet3D,
    normalized: &[Vector2<f64>; 4],
) -> Result<Matrix3<f64>, PpeError> {
    // padded to 9x9 so the thin SVD carries the full right-singular basis,
    // including the nullspace vector
    let mut a = DMatrix::<f64>::zeros(9, 9);
    for (k, (c, m)) in corners3d.points().iter().zip(normalized.iter()).enumerate() {
        let (x, y) = (c.x, c.y);
        let (xi, eta) = (m.x, m.y);
        let r0 = 2 * k;
        a[(r0, 0)] = x;
        a[(r0, 1)] = y;
        a[(r0, 2)] = 1.0;
        a[(r0, 6)] = -xi * x;
        a[(r0, 7)] = -xi * y;
        a[(r0, 8)] = -xi;
        let r1 = r0 + 1;
        a[(r1, 3)] = x;
        a[(r1, 4)] = y;
        a[(r1, 5)] = 1.0;
        a[(r1, 6)] = -eta * x;
        a[(r1, 7)] = -eta * y;
        a[(r1, 8)] = -eta;
    }
    let svd = a.svd(true, true);
    let v_t = svd.v_t.as_ref().ok_or(PpeError::DegenerateCorners)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].partial_cmp(&svd.singular_values[j]).unwrap());
    let smallest = order[0];
    let largest = *order.last().unwrap();
    // rank deficiency beyond the 1-dim nullspace means degenerate corners
    if svd.singular_values[order[1]] < 1e-10 * svd.singular_values[largest].max(1e-300) {
        return Err(PpeError::DegenerateCorners);
    }
    let h = v_t.row(smallest);
    let m = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    if m[(2, 2)].abs() < 1e-12 * m.norm() {
        return Err(PpeError::PlaneBehindCamera);
    }
    // scale so the marker center sits in front of the camera
    Ok(if m[(2, 2)] < 0.0 { -m } else { m })
}

/// Rotation taking the unit z axis onto unit vector `w`.
fn rotation_aligning_z_to(w: &Vector3<f64>) -> Rotation {
    let c = w.z;
    let k = Vector3::new(-w.y, w.x, 0.0); // e_z x w
    let s2 = k.norm_squared();
    if s2 < 1e-24 {
        if c > 0.0 {
            return Rotation::identity();
        }
        // w = -e_z: half turn about x
        return Rotation::from_axis_angle(Vector3::new(std::f64::consts::PI, 0.0, 0.0));
    }
    let kx = skew(k);
    Rotation::wrap_unchecked(Matrix3::identity() + kx + kx * kx * ((1.0 - c) / s2))
}

/// The two rotations whose (view-corrected) first-order projection matches
/// the homography Jacobian, plus the shared translation.
fn mirror_candidates(h: &Matrix3<f64>) -> Result<(Rotation, Rotation, Vector3<f64>), PpeError> {
    let origin_dir = Vector3::new(h[(0, 2)] / h[(2, 2)], h[(1, 2)] / h[(2, 2)], 1.0);
    let w = origin_dir.normalize();
    let rv = rotation_aligning_z_to(&w);
    // homography seen by the view-centered camera; its Jacobian at the plane
    // origin is the 2x2 block scaled by the depth
    let g = rv.matrix().transpose() * h;
    let j = Matrix2::new(g[(0, 0)], g[(0, 1)], g[(1, 0)], g[(1, 1)]) / g[(2, 2)];

    let svd = j.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let (s0, s1, u, v_t) = {
        let (i0, i1) = if svd.singular_values[0] >= svd.singular_values[1] { (0, 1) } else { (1, 0) };
        let perm = |m: &Matrix2<f64>, cols: bool| -> Matrix2<f64> {
            if i0 == 0 {
                *m
            } else if cols {
                Matrix2::from_columns(&[m.column(1).into_owned(), m.column(0).into_owned()])
            } else {
                Matrix2::from_rows(&[m.row(1).into_owned(), m.row(0).into_owned()])
            }
        };
        (
            svd.singular_values[i0],
            svd.singular_values[i1],
            perm(&u, true),
            perm(&v_t, false),
        )
    };
    if s0 < 1e-12 {
        return Err(PpeError::DegenerateCorners);
    }
    // make both factors proper rotations, pushing signs into the second
    // singular value
    let mut u = u;
    let mut v_t = v_t;
    let mut sigma = s1 / s0;
    if u.determinant() < 0.0 {
        u.column_mut(1).neg_mut();
        sigma = -sigma;
    }
    if v_t.determinant() < 0.0 {
        v_t.row_mut(1).neg_mut();
        sigma = -sigma;
    }
    let depth = 1.0 / s0;
    let translation = w * depth;

    let sigma = sigma.clamp(-1.0, 1.0);
    let sin_tilt = (1.0 - sigma * sigma).max(0.0).sqrt();
    let embed = |m: &Matrix2<f64>| {
        let mut out = Matrix3::identity();
        out.fixed_view_mut::<2, 2>(0, 0).copy_from(m);
        out
    };
    let (u3, v3_t) = (embed(&u), embed(&v_t));
    let completion = |sign: f64| {
        let core = Matrix3::new(
            1.0, 0.0, 0.0,
            0.0, sigma, -sign * sin_tilt,
            0.0, sign * sin_tilt, sigma,
        );
        Rotation::wrap_unchecked(rv.matrix() * (u3 * core * v3_t))
    };
    Ok((completion(1.0), completion(-1.0), translation))
}

/// Damped Gauss-Newton refinement of a pose on the corner reprojection
/// error; `rotation_only` freezes the translation (used to keep a hypothesis
/// at the shared translation). Returns the refined pose and its error; never
/// increases the error.
fn polish_pose(
    k: &CameraIntrinsics,
    corners3d: &CornerSet3D,
    corners2d: &CornerSet2D,
    init: RigidPose,
    max_iters: usize,
    rotation_only: bool,
) -> (RigidPose, f64) {
    let mut pose = init;
    let mut err = match reprojection_error(k, corners3d, corners2d, &pose) {
        Ok(e) => e,
        Err(_) => return (pose, f64::INFINITY),
    };
    let n_params = if rotation_only { 3 } else { 6 };
    let mut lambda = 1e-3;
    for _ in 0..max_iters {
        let mut jtj = nalgebra::Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        let mut valid = true;
        for (c, u) in corners3d.points().iter().zip(corners2d.points().iter()) {
            let x = pose.transform(c);
            if x.z <= 1e-12 {
                valid = false;
                break;
            }
            let inv_z = 1.0 / x.z;
            let proj = k.apply(&Vector2::new(x.x * inv_z, x.y * inv_z));
            let res = proj - u;
            // d(pixel)/d(camera point)
            let de_dx = nalgebra::Matrix2x3::new(
                k.fx * inv_z,
                k.skew * inv_z,
                -(k.fx * x.x + k.skew * x.y) * inv_z * inv_z,
                0.0,
                k.fy * inv_z,
                -k.fy * x.y * inv_z * inv_z,
            );
            // d(camera point)/d(omega, tau) with left-perturbation updates
            let rc = pose.rotation.rotate(c);
            let mut dx_dp = nalgebra::Matrix3x6::<f64>::zeros();
            dx_dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(rc)));
            dx_dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let jac = de_dx * dx_dp;
            jtj += jac.transpose() * jac;
            jtr += jac.transpose() * res;
        }
        if !valid {
            break;
        }
        let grad_norm = (0..n_params).map(|d| jtr[d].abs()).fold(0.0f64, f64::max);
        if grad_norm < 1e-14 {
            break;
        }
        let mut improved = false;
        for _ in 0..8 {
            let mut damped = jtj;
            for d in 0..6 {
                damped[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let step = if rotation_only {
                let block = damped.fixed_view::<3, 3>(0, 0).into_owned();
                let rhs = -Vector3::new(jtr[0], jtr[1], jtr[2]);
                match block.lu().solve(&rhs) {
                    Some(s) => Vector6::new(s[0], s[1], s[2], 0.0, 0.0, 0.0),
                    None => {
                        lambda *= 10.0;
                        continue;
                    }
                }
            } else {
                match damped.lu().solve(&(-jtr)) {
                    Some(s) => s,
                    None => {
                        lambda *= 10.0;
                        continue;
                    }
                }
            };
            let candidate = RigidPose::new(
                pose.rotation.retract(Vector3::new(step[0], step[1], step[2])),
                pose.translation + Vector3::new(step[3], step[4], step[5]),
            );
            match reprojection_error(k, corners3d, corners2d, &candidate) {
                Ok(e) if e < err => {
                    pose = candidate;
                    let rel_drop = (err - e) / err.max(1e-300);
                    err = e;
                    lambda = (lambda * 0.1).max(1e-12);
                    improved = true;
                    if rel_drop < 1e-14 {
                        return (pose, err);
                    }
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !improved {
            break;
        }
    }
    (pose, err)
}

fn all_corners_in_front(corners3d: &CornerSet3D, pose: &RigidPose) -> bool {
    corners3d.points().iter().all(|c| pose.transform(c).z > 1e-12)
}

/// Two-solution planar pose estimation for a square marker of known size.
///
/// Each returned hypothesis is a local minimum of the corner reprojection
/// error; the hypotheses are reported lower-error-first and share the
/// hypothesis-0 translation. If only one distinct minimum exists (e.g. a
/// fronto-parallel view) the single solution is duplicated.
pub fn ppe_solve(
    corners2d: &CornerSet2D,
    spec: &MarkerSpec,
    k: &CameraIntrinsics,
) -> Result<AmbiguousDetection, PpeError> {
    ppe_solve_for_image(0, corners2d, spec, k)
}

/// [`ppe_solve`] with an explicit image id recorded on the detection.
pub fn ppe_solve_for_image(
    image_id: u32,
    corners2d: &CornerSet2D,
    spec: &MarkerSpec,
    k: &CameraIntrinsics,
) -> Result<AmbiguousDetection, PpeError> {
    let corners3d = canonical_corners(spec);
    let normalized = {
        let pts = corners2d.points();
        [
            k.unproject(&pts[0]),
            k.unproject(&pts[1]),
            k.unproject(&pts[2]),
            k.unproject(&pts[3]),
        ]
    };
    let h = homography_from_corners(&corners3d, &normalized)?;
    let (ra, rb, translation) = mirror_candidates(&h)?;

    let mut refined: Vec<(RigidPose, f64)> = Vec::with_capacity(2);
    for rot in [ra, rb] {
        let init = RigidPose::new(rot, translation);
        let (pose, err) = polish_pose(k, &corners3d, corners2d, init, 30, false);
        if err.is_finite() && all_corners_in_front(&corners3d, &pose) {
            refined.push((pose, err));
        }
    }
    if refined.is_empty() {
        return Err(PpeError::PlaneBehindCamera);
    }
    refined.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let (best, best_err) = refined[0];

    // a second distinct minimum; otherwise duplicate the single solution.
    // Moving it onto the shared translation takes it off its own 6-DOF
    // optimum, so its rotation is re-polished at the fixed translation.
    let second = refined.get(1).copied().filter(|(pose, _)| {
        angular_difference_deg(&pose.rotation, &best.rotation) > 1e-6
    });
    let (pose0, err0, pose1, err1) = match second {
        Some((pose, _)) => {
            let unified = RigidPose::new(pose.rotation, best.translation);
            let (unified, err) = polish_pose(k, &corners3d, corners2d, unified, 20, true);
            if !err.is_finite()
                || !all_corners_in_front(&corners3d, &unified)
                || angular_difference_deg(&unified.rotation, &best.rotation) <= 1e-6
            {
                (best, best_err, best, best_err)
            } else if err >= best_err {
                (best, best_err, unified, err)
            } else {
                // the constrained re-polish promoted the second hypothesis
                (unified, err, best, best_err)
            }
        }
        None => (best, best_err, best, best_err),
    };

    AmbiguousDetection::new(image_id, spec.id, *corners2d, pose0, pose1, err0, err1)
}

/// Projects the canonical corners through `true_pose`, perturbs them with
/// isotropic Gaussian pixel noise, solves PPE on the result, and labels the
/// hypothesis closer in angle to the true rotation.
///
/// Returns the noisy corners, the detection, and the true hypothesis label.
/// Deterministic for a fixed `rng_seed`.
pub fn synth_detection(
    image_id: u32,
    true_pose: &RigidPose,
    spec: &MarkerSpec,
    k: &CameraIntrinsics,
    noise_sigma: f64,
    rng_seed: u64,
) -> Result<(CornerSet2D, AmbiguousDetection, u8), PpeError> {
    let corners3d = canonical_corners(spec);
    let mut pts = [Vector2::zeros(); 4];
    for (i, c) in corners3d.points().iter().enumerate() {
        pts[i] = project(k, c, true_pose)?;
    }
    if noise_sigma > 0.0 {
        let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
        let normal = Normal::new(0.0, noise_sigma).expect("sigma must be non-negative");
        for p in &mut pts {
            p.x += normal.sample(&mut rng);
            p.y += normal.sample(&mut rng);
        }
    }
    let corners = CornerSet2D(pts);
    let detection = ppe_solve_for_image(image_id, &corners, spec, k)?;
    let label = crate::harness::ground_truth_label(&detection, &true_pose.rotation);
    Ok((corners, detection, label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0).unwrap()
    }

    fn project_corners(
        k: &CameraIntrinsics,
        spec: &MarkerSpec,
        pose: &RigidPose,
    ) -> CornerSet2D {
        let c3 = canonical_corners(spec);
        let mut pts = [Vector2::zeros(); 4];
        for (i, c) in c3.points().iter().enumerate() {
            pts[i] = project(k, c, pose).unwrap();
        }
        CornerSet2D(pts)
    }

    #[test]
    fn canonical_corner_layout() {
        let c = canonical_corners(&MarkerSpec { id: 0, size: 2.0 });
        let pts = c.points();
        assert_eq!(pts[0], Vector3::new(-1.0, 1.0, 0.0));
        assert_eq!(pts[1], Vector3::new(1.0, 1.0, 0.0));
        assert_eq!(pts[2], Vector3::new(1.0, -1.0, 0.0));
        assert_eq!(pts[3], Vector3::new(-1.0, -1.0, 0.0));

        let half = canonical_corners(&MarkerSpec { id: 0, size: 1.0 });
        for (a, b) in half.points().iter().zip(pts.iter()) {
            assert_eq!(*a * 2.0, *b);
        }
        let odd = canonical_corners(&MarkerSpec { id: 0, size: 0.37 });
        let centroid: Vector3<f64> = odd.points().iter().sum();
        assert_eq!(centroid, Vector3::zeros());
    }

    #[test]
    fn fronto_parallel_round_trip() {
        let k = test_intrinsics();
        let spec = MarkerSpec { id: 3, size: 0.2 };
        let truth = RigidPose::new(Rotation::identity(), Vector3::new(0.0, 0.0, 1.0));
        let corners = project_corners(&k, &spec, &truth);
        let det = ppe_solve(&corners, &spec, &k).unwrap();
        assert!(angular_difference_deg(&det.pose0.rotation, &truth.rotation) < 1e-4);
        assert!((det.pose0.translation - truth.translation).norm() < 1e-6);
        assert!(det.err0 <= det.err1);
        assert_eq!(det.pose0.translation, det.pose1.translation);
    }

    #[test]
    fn tilted_close_up_is_unambiguous() {
        let k = test_intrinsics();
        let spec = MarkerSpec { id: 1, size: 0.3 };
        let truth = RigidPose::new(
            Rotation::from_axis_angle(Vector3::new(0.9, 0.3, 0.1)),
            Vector3::new(0.05, -0.1, 0.7),
        );
        let corners = project_corners(&k, &spec, &truth);
        let det = ppe_solve(&corners, &spec, &k).unwrap();
        assert!(
            angular_difference_deg(&det.pose0.rotation, &truth.rotation) < 1e-4,
            "pose0 should match ground truth, diff {}",
            angular_difference_deg(&det.pose0.rotation, &truth.rotation)
        );
        assert!((det.pose0.translation - truth.translation).norm() < 1e-6);
        assert!(det.error_ratio() < 0.1, "ratio {}", det.error_ratio());
    }

    #[test]
    fn noiseless_round_trips_recover_truth() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let k = test_intrinsics();
        let spec = MarkerSpec { id: 0, size: 0.2 };
        let mut checked = 0;
        for _ in 0..60 {
            let truth = RigidPose::new(
                Rotation::from_axis_angle(Vector3::new(
                    rng.random::<f64>() * 1.6 - 0.8,
                    rng.random::<f64>() * 1.6 - 0.8,
                    rng.random::<f64>() * 3.0 - 1.5,
                )),
                Vector3::new(
                    rng.random::<f64>() * 0.8 - 0.4,
                    rng.random::<f64>() * 0.6 - 0.3,
                    rng.random::<f64>() * 3.0 + 0.6,
                ),
            );
            let c3 = canonical_corners(&spec);
            if !c3.points().iter().all(|c| truth.transform(c).z > 0.05) {
                continue;
            }
            let corners = project_corners(&k, &spec, &truth);
            let det = match ppe_solve(&corners, &spec, &k) {
                Ok(d) => d,
                Err(PpeError::DegenerateCorners) => continue,
                Err(e) => panic!("unexpected: {e}"),
            };
            let best = angular_difference_deg(&det.pose0.rotation, &truth.rotation)
                .min(angular_difference_deg(&det.pose1.rotation, &truth.rotation));
            assert!(best < 1e-4, "round trip angular error {best}");
            let terr = (det.pose0.translation - truth.translation).norm();
            assert!(terr < 1e-6, "round trip translation error {terr}");
            checked += 1;
        }
        assert!(checked > 30);
    }

    #[test]
    fn hypotheses_are_local_minima() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let k = test_intrinsics();
        let spec = MarkerSpec { id: 0, size: 0.15 };
        let truth = RigidPose::new(
            Rotation::from_axis_angle(Vector3::new(0.4, -0.25, 0.3)),
            Vector3::new(0.1, 0.05, 2.5),
        );
        let (_, det, _) = synth_detection(0, &truth, &spec, &k, 1.0, 99).unwrap();
        let c3 = canonical_corners(&spec);
        // hypothesis 0 is a full 6-DOF local minimum; hypothesis 1 sits at
        // the shared translation, so it is a rotation-block local minimum
        for (pose, err, free_translation) in
            [(det.pose0, det.err0, true), (det.pose1, det.err1, false)]
        {
            for _ in 0..1000 {
                let d_rot = Vector3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                ) * 2e-4;
                let d_t = if free_translation {
                    Vector3::new(
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                    ) * 2e-4
                } else {
                    Vector3::zeros()
                };
                let perturbed =
                    RigidPose::new(pose.rotation.retract(d_rot), pose.translation + d_t);
                let e = reprojection_error(&k, &c3, &det.corners2d, &perturbed).unwrap();
                assert!(e >= err - 1e-9, "perturbed error {e} below minimum {err}");
            }
        }
    }

    #[test]
    fn small_distant_markers_are_often_ambiguous() {
        let k = test_intrinsics();
        let spec = MarkerSpec { id: 0, size: 0.1 };
        let mut ambiguous = 0;
        let mut total = 0;
        for trial in 0..120u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(1000 + trial);
            let truth = RigidPose::new(
                Rotation::from_axis_angle(Vector3::new(
                    rng.random::<f64>() * 0.6 - 0.3,
                    rng.random::<f64>() * 0.6 - 0.3,
                    rng.random::<f64>() * 3.0,
                )),
                Vector3::new(
                    rng.random::<f64>() * 0.5 - 0.25,
                    rng.random::<f64>() * 0.5 - 0.25,
                    5.0 + rng.random::<f64>() * 2.0,
                ),
            );
            match synth_detection(0, &truth, &spec, &k, 2.0, 5000 + trial) {
                Ok((_, det, _)) => {
                    total += 1;
                    if det.error_ratio() >= 0.6 {
                        ambiguous += 1;
                    }
                }
                Err(_) => continue,
            }
        }
        assert!(total > 80);
        let rate = ambiguous as f64 / total as f64;
        assert!(rate > 0.1, "expected a substantial ambiguous fraction, got {rate}");
    }

    #[test]
    fn synth_detection_noiseless_labels_zero() {
        let k = test_intrinsics();
        let spec = MarkerSpec { id: 0, size: 0.2 };
        let truth = RigidPose::new(
            Rotation::from_axis_angle(Vector3::new(0.3, -0.2, 0.1)),
            Vector3::new(0.0, 0.0, 1.5),
        );
        let (_, det, label) = synth_detection(0, &truth, &spec, &k, 0.0, 1).unwrap();
        assert_eq!(label, 0);
        assert!(angular_difference_deg(&det.pose0.rotation, &truth.rotation) < 1e-6);
        assert!(det.err0 < 1e-12);
    }

    #[test]
    fn lower_error_pose_is_sometimes_wrong() {
        // the motivating failure: with noise, the lower-error hypothesis can
        // be the incorrect one
        let k = test_intrinsics();
        let spec = MarkerSpec { id: 0, size: 0.1 };
        let mut wrong = 0;
        let mut total = 0;
        for trial in 0..500u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(90_000 + trial);
            let truth = RigidPose::new(
                Rotation::from_axis_angle(Vector3::new(
                    rng.random::<f64>() * 0.8 - 0.4,
                    rng.random::<f64>() * 0.8 - 0.4,
                    rng.random::<f64>() * 3.0,
                )),
                Vector3::new(
                    rng.random::<f64>() * 0.4 - 0.2,
                    rng.random::<f64>() * 0.4 - 0.2,
                    5.5 + rng.random::<f64>(),
                ),
            );
            if let Ok((_, _, label)) = synth_detection(0, &truth, &spec, &k, 3.0, 70_000 + trial) {
                total += 1;
                if label == 1 {
                    wrong += 1;
                }
            }
        }
        assert!(total > 300);
        assert!(wrong > 0, "expected some trials where hypothesis 1 is the true pose");
    }

    #[test]
    fn synth_detection_is_deterministic() {
        let k = test_intrinsics();
        let spec = MarkerSpec { id: 0, size: 0.15 };
        let truth = RigidPose::new(
            Rotation::from_axis_angle(Vector3::new(0.2, 0.5, -0.3)),
            Vector3::new(0.1, -0.05, 2.0),
        );
        let (c1, d1, l1) = synth_detection(4, &truth, &spec, &k, 2.0, 777).unwrap();
        let (c2, d2, l2) = synth_detection(4, &truth, &spec, &k, 2.0, 777).unwrap();
        assert_eq!(c1.points(), c2.points());
        assert_eq!(l1, l2);
        assert_eq!(d1.pose0.rotation.matrix(), d2.pose0.rotation.matrix());
        assert_eq!(d1.pose1.rotation.matrix(), d2.pose1.rotation.matrix());
        assert_eq!(d1.err0, d2.err0);
        assert_eq!(d1.err1, d2.err1);
    }

    #[test]
    fn degenerate_corners_rejected() {
        let k = test_intrinsics();
        let spec = MarkerSpec { id: 0, size: 0.2 };
        let collinear = CornerSet2D([
            Vector2::new(100.0, 100.0),
            Vector2::new(150.0, 100.0),
            Vector2::new(200.0, 100.0),
            Vector2::new(250.0, 100.0),
        ]);
        assert!(matches!(
            ppe_solve(&collinear, &spec, &k),
            Err(PpeError::DegenerateCorners)
        ));
        let repeated = CornerSet2D([
            Vector2::new(100.0, 100.0),
            Vector2::new(100.0, 100.0),
            Vector2::new(200.0, 150.0),
            Vector2::new(150.0, 220.0),
        ]);
        assert!(ppe_solve(&repeated, &spec, &k).is_err());
    }

    #[test]
    fn solver_is_deterministic_in_corners() {
        let k = test_intrinsics();
        let spec = MarkerSpec { id: 2, size: 0.25 };
        let truth = RigidPose::new(
            Rotation::from_axis_angle(Vector3::new(0.5, 0.2, 0.9)),
            Vector3::new(-0.2, 0.1, 1.8),
        );
        let corners = project_corners(&k, &spec, &truth);
        let a = ppe_solve(&corners, &spec, &k).unwrap();
        let b = ppe_solve(&corners, &spec, &k).unwrap();
        assert_eq!(a.pose0.rotation.matrix(), b.pose0.rotation.matrix());
        assert_eq!(a.err0, b.err0);
        assert_eq!(a.err1, b.err1);
    }
}
