//! Rotation/pose algebra, camera projection and the angular metrics used
//! throughout the pipeline.
//!
//! Rotations are stored as 3x3 matrices; solvers parameterize updates in the
//! 3-dimensional tangent space (axis-angle increments) and retract via the
//! exponential map, which keeps iterates on SO(3) while matching the chordal
//! residuals of the averaging objectives.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

/// Tolerance for the orthonormality / determinant invariants of [`Rotation`].
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("matrix is not a rotation: {0}")]
    NotARotation(&'static str),
    #[error("point has non-positive depth (z = {z:.3e})")]
    NonPositiveDepth { z: f64 },
    #[error("degenerate matrix: at least two singular values below 1e-12")]
    DegenerateMatrix,
    #[error("camera intrinsics invalid: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("corner set invalid: {0}")]
    InvalidCorners(&'static str),
}

/// An element of SO(3), stored as a 3x3 matrix.
///
/// Construction through [`Rotation::from_matrix`] checks orthonormality and
/// unit determinant to 1e-9; the cheap constructors (`identity`,
/// `from_axis_angle`, composition) preserve the invariants by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Checked constructor; rejects matrices that are not rotations.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let rrt = m * m.transpose();
        let dev = (rrt - Matrix3::identity()).abs().max();
        if dev > ROTATION_TOL {
            return Err(GeometryError::NotARotation("R * R^T deviates from I"));
        }
        if (m.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::NotARotation("determinant is not +1"));
        }
        Ok(Rotation(m))
    }

    /// Exponential map: axis-angle vector (radians) to rotation (Rodrigues).
    pub fn from_axis_angle(w: Vector3<f64>) -> Self {
        let theta = w.norm();
        if theta < 1e-12 {
            // second-order expansion keeps the result orthogonal to machine precision
            let k = skew(w);
            return Rotation(Matrix3::identity() + k + k * k * 0.5);
        }
        let k = skew(w / theta);
        Rotation(Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos()))
    }

    /// Logarithm map: the axis-angle vector w with `Rotation::from_axis_angle(w) == self`.
    pub fn log(&self) -> Vector3<f64> {
        let m = &self.0;
        let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = cos_theta.acos();
        let v = Vector3::new(
            m[(2, 1)] - m[(1, 2)],
            m[(0, 2)] - m[(2, 0)],
            m[(1, 0)] - m[(0, 1)],
        );
        if theta < 1e-9 {
            return v * 0.5;
        }
        if (std::f64::consts::PI - theta) < 1e-6 {
            // near 180 degrees the off-diagonal differences vanish; use the
            // diagonal to recover the axis
            let mut axis = Vector3::new(
                ((m[(0, 0)] + 1.0) * 0.5).max(0.0).sqrt(),
                ((m[(1, 1)] + 1.0) * 0.5).max(0.0).sqrt(),
                ((m[(2, 2)] + 1.0) * 0.5).max(0.0).sqrt(),
            );
            // fix signs from the off-diagonal sums
            if m[(0, 1)] + m[(1, 0)] < 0.0 {
                axis.y = -axis.y;
            }
            if m[(0, 2)] + m[(2, 0)] < 0.0 {
                axis.z = -axis.z;
            }
            if axis.norm() > 1e-12 {
                return axis.normalize() * theta;
            }
        }
        v * (theta / (2.0 * theta.sin()))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Rotation {
        self.transpose()
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Left-perturbation retraction: `exp(w) * self`.
    pub fn retract(&self, w: Vector3<f64>) -> Rotation {
        Rotation::from_axis_angle(w).compose(self)
    }

    /// Unchecked wrap for matrices known to be rotations by construction.
    pub(crate) fn wrap_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

/// Cross-product (hat) matrix of w.
pub fn skew(w: Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// The vector v with `skew(v)` equal to the antisymmetric part of `m`.
pub fn vee_antisym(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// A rigid transform (rotation then translation), in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl RigidPose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        RigidPose { rotation, translation }
    }

    pub fn identity() -> Self {
        RigidPose::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// Composition: `(self ∘ other)(x) = self(other(x))`.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose::new(
            self.rotation.compose(&other.rotation),
            self.rotation.rotate(&other.translation) + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidPose {
        let rinv = self.rotation.inverse();
        let t = -rinv.rotate(&self.translation);
        RigidPose::new(rinv, t)
    }
}

/// Pinhole intrinsics in pixels. `skew` defaults to zero.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub skew: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive"));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy, skew: 0.0 })
    }

    /// Identity-normalized intrinsics (fx = fy = 1, principal point at origin).
    pub fn normalized() -> Self {
        CameraIntrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, skew: 0.0 }
    }

    /// Pixel -> normalized image coordinates (inverse of the K mapping).
    pub fn unproject(&self, px: &Vector2<f64>) -> Vector2<f64> {
        let y = (px.y - self.cy) / self.fy;
        let x = (px.x - self.cx - self.skew * y) / self.fx;
        Vector2::new(x, y)
    }

    /// Normalized image coordinates -> pixels.
    pub fn apply(&self, n: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * n.x + self.skew * n.y + self.cx, self.fy * n.y + self.cy)
    }
}

/// 4 ordered 2D corner observations (pixels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSet2D(pub [Vector2<f64>; 4]);

impl CornerSet2D {
    pub fn points(&self) -> &[Vector2<f64>; 4] {
        &self.0
    }
}

/// 4 ordered 3D corners in the marker frame (meters), all on z = 0 with the
/// centroid at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSet3D([Vector3<f64>; 4]);

impl CornerSet3D {
    /// Checked constructor; enforces z = 0 exactly, centroid at origin and a
    /// common side length.
    pub fn new(points: [Vector3<f64>; 4]) -> Result<Self, GeometryError> {
        if points.iter().any(|p| p.z != 0.0) {
            return Err(GeometryError::InvalidCorners("corners must lie on z = 0"));
        }
        let centroid: Vector3<f64> = points.iter().sum::<Vector3<f64>>() / 4.0;
        if centroid.norm() > 1e-12 {
            return Err(GeometryError::InvalidCorners("centroid must be the origin"));
        }
        let side = (points[1] - points[0]).norm();
        for k in 0..4 {
            let s = (points[(k + 1) % 4] - points[k]).norm();
            if (s - side).abs() > 1e-9 {
                return Err(GeometryError::InvalidCorners("sides must have equal length"));
            }
        }
        Ok(CornerSet3D(points))
    }

    pub fn points(&self) -> &[Vector3<f64>; 4] {
        &self.0
    }

    pub fn side_length(&self) -> f64 {
        (self.0[1] - self.0[0]).norm()
    }
}

/// Pinhole projection of marker-frame point `c` through pose `p` and
/// intrinsics `k`. Fails if the transformed point is not strictly in front of
/// the camera.
pub fn project(
    k: &CameraIntrinsics,
    c: &Vector3<f64>,
    p: &RigidPose,
) -> Result<Vector2<f64>, GeometryError> {
    let x = p.transform(c);
    if x.z <= 1e-12 {
        return Err(GeometryError::NonPositiveDepth { z: x.z });
    }
    Ok(k.apply(&Vector2::new(x.x / x.z, x.y / x.z)))
}

/// Sum of squared corner reprojection residuals (pixels^2, or normalized
/// units^2 for identity intrinsics).
pub fn reprojection_error(
    k: &CameraIntrinsics,
    corners3d: &CornerSet3D,
    corners2d: &CornerSet2D,
    p: &RigidPose,
) -> Result<f64, GeometryError> {
    let mut total = 0.0;
    for (c, u) in corners3d.points().iter().zip(corners2d.points().iter()) {
        let proj = project(k, c, p)?;
        total += (proj - u).norm_squared();
    }
    Ok(total)
}

/// Ratio of the smaller to the larger of two reprojection errors, in [0, 1].
/// Values near 1 mean the two pose hypotheses are indistinguishable. The
/// (0, 0) case returns 1.0 by convention: no information to disambiguate.
pub fn error_ratio(e0: f64, e1: f64) -> f64 {
    debug_assert!(e0 >= 0.0 && e1 >= 0.0);
    let (lo, hi) = if e0 <= e1 { (e0, e1) } else { (e1, e0) };
    if hi == 0.0 {
        return 1.0;
    }
    lo / hi
}

/// Frobenius-norm distance between two rotations, in [0, 2*sqrt(2)].
pub fn chordal_distance(a: &Rotation, b: &Rotation) -> f64 {
    (a.matrix() - b.matrix()).norm()
}

/// Angular difference in degrees, computed as
/// `(180/pi) * acos(1 - 0.25 * ||I - A B^T||_F^2)` with the acos argument
/// clamped to [-1, 1] to guard against round-off near 0 and 180 degrees.
pub fn angular_difference_deg(a: &Rotation, b: &Rotation) -> f64 {
    let rel = a.matrix() * b.matrix().transpose();
    let dev = (Matrix3::identity() - rel).norm_squared();
    let arg = (1.0 - 0.25 * dev).clamp(-1.0, 1.0);
    arg.acos().to_degrees()
}

/// Orthogonal projection of `m` onto SO(3) (Procrustes): the rotation
/// minimizing the Frobenius distance to `m`, with det = +1 enforced through a
/// sign flip on the smallest singular value.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Result<Rotation, GeometryError> {
    let svd = m.svd(true, true);
    let u = svd.u.ok_or(GeometryError::DegenerateMatrix)?;
    let v_t = svd.v_t.ok_or(GeometryError::DegenerateMatrix)?;
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if sv[1] < 1e-12 {
        return Err(GeometryError::DegenerateMatrix);
    }
    let det = (u * v_t).determinant();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    // re-associate the sign fix with the smallest singular value
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .unwrap()
    });
    // nalgebra does not guarantee sorted singular values; permute so the sign
    // flip lands on the smallest one
    let mut u_cols = [u.column(order[0]).into_owned(), u.column(order[1]).into_owned(), u.column(order[2]).into_owned()];
    let v_t_rows = [
        v_t.row(order[0]).into_owned(),
        v_t.row(order[1]).into_owned(),
        v_t.row(order[2]).into_owned(),
    ];
    u_cols[2] *= fix[(2, 2)];
    let u_sorted = Matrix3::from_columns(&u_cols);
    let v_t_sorted = Matrix3::from_rows(&v_t_rows);
    Ok(Rotation::wrap_unchecked(u_sorted * v_t_sorted))
}
