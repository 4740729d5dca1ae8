//! SE(3) transforms and the 9-number parameterization used by the optimizers.
//!
//! A transform here maps world points into the estimated object frame (the
//! frame the signed distance field lives in). Rotations are optimized through
//! the continuous two-column encoding: six unconstrained reals are mapped to a
//! rotation matrix by Gram-Schmidt, which is differentiable everywhere the
//! columns stay non-degenerate.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::points::Workspace;

/// Gram-Schmidt rejects inputs whose columns are shorter than this after
/// projection; below it the rotation is numerically undefined.
pub const DEGENERACY_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Error)]
#[error("degenerate rotation parameters: |a1|={norm_a1:.3e}, |a2 - proj|={norm_u2:.3e}")]
pub struct DegenerateRotation {
    pub norm_a1: f64,
    pub norm_u2: f64,
}

/// Optimization variable: translation plus the 6-number rotation encoding
/// (two unnormalized 3-vectors that Gram-Schmidt turns into the first two
/// rotation columns).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseParam {
    pub t: [f64; 3],
    pub r6: [f64; 6],
}

impl PoseParam {
    pub fn new(t: Vector3<f64>, r6: [f64; 6]) -> Self {
        Self { t: t.into(), r6 }
    }

    pub fn identity() -> Self {
        Self {
            t: [0.0; 3],
            r6: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.t)
    }

    pub fn col_a1(&self) -> Vector3<f64> {
        Vector3::new(self.r6[0], self.r6[1], self.r6[2])
    }

    pub fn col_a2(&self) -> Vector3<f64> {
        Vector3::new(self.r6[3], self.r6[4], self.r6[5])
    }

    /// Flat layout `[t, a1, a2]` used by the evolutionary optimizers.
    pub fn to_vec9(&self) -> [f64; 9] {
        [
            self.t[0], self.t[1], self.t[2], self.r6[0], self.r6[1], self.r6[2], self.r6[3],
            self.r6[4], self.r6[5],
        ]
    }

    pub fn from_vec9(v: &[f64; 9]) -> Self {
        Self {
            t: [v[0], v[1], v[2]],
            r6: [v[3], v[4], v[5], v[6], v[7], v[8]],
        }
    }

    /// Realizes the rotation via Gram-Schmidt and copies the translation.
    pub fn to_transform(&self) -> Result<RigidTransform, DegenerateRotation> {
        let rotation = rot6_to_matrix(&self.col_a1(), &self.col_a2())?;
        Ok(RigidTransform {
            rotation,
            translation: self.translation(),
        })
    }

    pub fn is_degenerate(&self) -> bool {
        rot6_to_matrix(&self.col_a1(), &self.col_a2()).is_err()
    }

    /// Replaces the rotation block with the two columns of `rotation`,
    /// restoring a well-conditioned encoding of the same orientation.
    pub fn reorthonormalize(&mut self, rotation: &Matrix3<f64>) {
        let c0 = rotation.column(0);
        let c1 = rotation.column(1);
        self.r6 = [c0[0], c0[1], c0[2], c1[0], c1[1], c1[2]];
    }
}

impl From<RigidTransform> for PoseParam {
    fn from(t: RigidTransform) -> Self {
        let c0 = t.rotation.column(0);
        let c1 = t.rotation.column(1);
        Self {
            t: t.translation.into(),
            r6: [c0[0], c0[1], c0[2], c1[0], c1[1], c1[2]],
        }
    }
}

/// A rigid transform `p -> R p + t` with `R` a proper rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_all(&self, pts: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        pts.iter().map(|p| self.apply(p)).collect()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, other: &Self) -> Self {
        // self ∘ other: apply `other` first.
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Orthonormality and determinant defects, for invariant checks.
    pub fn rotation_defect(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        let det = self.rotation.determinant() - 1.0;
        gram.norm().max(det.abs())
    }

    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64, translation: Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    /// Rotation by `angle` about unit `axis` (Rodrigues), no translation.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let k = axis.normalize();
        let kx = skew(&k);
        let rotation = Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos());
        Self {
            rotation,
            translation: Vector3::zeros(),
        }
    }

    /// Geodesic rotation angle from the identity, in radians.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Gram-Schmidt: `b1 = a1/|a1|`, `b2 = normalize(a2 - (b1·a2) b1)`,
/// `b3 = b1 × b2`; returns the matrix with columns `(b1, b2, b3)`.
pub fn rot6_to_matrix(a1: &Vector3<f64>, a2: &Vector3<f64>) -> Result<Matrix3<f64>, DegenerateRotation> {
    let n1 = a1.norm();
    if n1 < DEGENERACY_THRESHOLD {
        return Err(DegenerateRotation {
            norm_a1: n1,
            norm_u2: 0.0,
        });
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(a2);
    let n2 = u2.norm();
    if n2 < DEGENERACY_THRESHOLD {
        return Err(DegenerateRotation {
            norm_a1: n1,
            norm_u2: n2,
        });
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Pulls a gradient with respect to the rotation matrix back through
/// Gram-Schmidt to the six input numbers.
///
/// `grad_rot[(i, j)]` is dL/dR_ij for the matrix produced by
/// [`rot6_to_matrix`] on the same `(a1, a2)`.
pub fn rot6_backprop(
    a1: &Vector3<f64>,
    a2: &Vector3<f64>,
    grad_rot: &Matrix3<f64>,
) -> Result<[f64; 6], DegenerateRotation> {
    let n1 = a1.norm();
    if n1 < DEGENERACY_THRESHOLD {
        return Err(DegenerateRotation {
            norm_a1: n1,
            norm_u2: 0.0,
        });
    }
    let b1 = a1 / n1;
    let d = b1.dot(a2);
    let u2 = a2 - b1 * d;
    let n2 = u2.norm();
    if n2 < DEGENERACY_THRESHOLD {
        return Err(DegenerateRotation {
            norm_a1: n1,
            norm_u2: n2,
        });
    }
    let b2 = u2 / n2;

    let g1: Vector3<f64> = grad_rot.column(0).into();
    let g2: Vector3<f64> = grad_rot.column(1).into();
    let g3: Vector3<f64> = grad_rot.column(2).into();

    // b3 = b1 × b2 feeds both earlier columns.
    let gb2 = g2 + g3.cross(&b1);
    let gu2 = (gb2 - b2 * b2.dot(&gb2)) / n2;
    let ga2 = gu2 - b1 * b1.dot(&gu2);
    let gb1 = g1 + b2.cross(&g3) - a2 * gu2.dot(&b1) - gu2 * d;
    let ga1 = (gb1 - b1 * b1.dot(&gb1)) / n1;

    Ok([ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z])
}

/// `x̃_i = R x_i + t` for every input point.
pub fn transform_points(t: &RigidTransform, pts: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    t.apply_all(pts)
}

/// Standard normal draw, pinned to f64.
pub fn normal_sample<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform rotation via a normalized 4D Gaussian quaternion.
pub fn sample_uniform_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let q = Quaternion::new(
            normal_sample(rng),
            normal_sample(rng),
            normal_sample(rng),
            normal_sample(rng),
        );
        if q.norm() > 1e-12 {
            return UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        }
    }
}

/// Pose with translation uniform in the workspace and rotation uniform on
/// SO(3), encoded for optimization.
pub fn sample_uniform_pose<R: Rng>(workspace: &Workspace, rng: &mut R) -> PoseParam {
    let min = workspace.min();
    let max = workspace.max();
    let t = Vector3::new(
        rng.random_range(min.x..max.x),
        rng.random_range(min.y..max.y),
        rng.random_range(min.z..max.z),
    );
    let rotation = sample_uniform_rotation(rng);
    PoseParam::from(RigidTransform::new(rotation, t))
}

/// Uniform unit vector (3D Gaussian, normalized).
pub fn sample_unit_vector<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(normal_sample(rng), normal_sample(rng), normal_sample(rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Symmetric Chamfer distance between the images of `surface_pts` under the
/// two transforms: mean squared nearest-neighbor distance in each direction,
/// summed. Units are meters squared.
pub fn transform_distance(
    t1: &RigidTransform,
    t2: &RigidTransform,
    surface_pts: &[Vector3<f64>],
) -> f64 {
    assert!(!surface_pts.is_empty(), "transform distance needs surface points");
    let a = t1.apply_all(surface_pts);
    let b = t2.apply_all(surface_pts);
    chamfer(&a, &b)
}

/// Symmetric Chamfer on already-transformed clouds.
pub fn chamfer(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    mean_sq_nearest(a, b) + mean_sq_nearest(b, a)
}

fn mean_sq_nearest(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> f64 {
    let mut total = 0.0;
    for p in from {
        let mut best = f64::INFINITY;
        for q in to {
            let d = (p - q).norm_squared();
            if d < best {
                best = d;
            }
        }
        total += best;
    }
    total / from.len() as f64
}

/// Transform serialization: rotation as 9 row-major reals plus translation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformJson {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl From<&RigidTransform> for TransformJson {
    fn from(t: &RigidTransform) -> Self {
        let m = &t.rotation;
        Self {
            r: [
                m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)],
                m[(2, 1)], m[(2, 2)],
            ],
            t: t.translation.into(),
        }
    }
}

impl From<&TransformJson> for RigidTransform {
    fn from(j: &TransformJson) -> Self {
        let r = &j.r;
        RigidTransform {
            rotation: Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]),
            translation: Vector3::from(j.t),
        }
    }
}
