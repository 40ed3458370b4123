//! Rigid transforms in homogeneous form.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-6;

/// A rigid transform stored as a 4×4 homogeneous matrix (meters, radians).
///
/// The bottom row is always `(0, 0, 0, 1)` and the rotation block is
/// orthonormal with unit determinant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose(Matrix4<f64>);

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    /// Row-major 4×4.
    matrix: [[f64; 4]; 4],
}

impl TryFrom<PoseRepr> for Pose {
    type Error = Error;
    fn try_from(repr: PoseRepr) -> Result<Self> {
        let m = Matrix4::from_fn(|r, c| repr.matrix[r][c]);
        Pose::from_matrix(m)
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        PoseRepr { matrix: p.to_rows() }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose(Matrix4::identity())
    }

    /// Validates the homogeneous-transform invariants.
    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("pose contains non-finite entries".into()));
        }
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Validation(format!("pose bottom row is {bottom:?}, expected (0,0,0,1)")));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let gram_err = (r.transpose() * r - Matrix3::identity()).amax();
        let det = r.determinant();
        if gram_err > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::Validation(format!(
                "rotation block not orthonormal (|RᵀR−I|∞ = {gram_err:.3e}, det = {det:.9})"
            )));
        }
        Ok(Pose(m))
    }

    /// Builds a pose from a rotation block that is only approximately
    /// orthonormal (e.g. parsed from text with limited precision). The block is
    /// replaced by its nearest rotation; deviations above `tol` are rejected.
    pub fn from_approx_rt(r: Matrix3<f64>, t: Vector3<f64>, tol: f64) -> Result<Self> {
        let gram_err = (r.transpose() * r - Matrix3::identity()).amax();
        if !gram_err.is_finite() || gram_err > tol {
            return Err(Error::Validation(format!(
                "rotation block too far from orthonormal (|RᵀR−I|∞ = {gram_err:.3e})"
            )));
        }
        let svd = r.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut rot = u * v_t;
        if rot.determinant() < 0.0 {
            return Err(Error::Validation("rotation block is a reflection".into()));
        }
        // one Newton polish step keeps the result orthonormal to machine precision
        rot = 0.5 * (rot + rot.try_inverse().unwrap().transpose());
        Pose::from_matrix(compose_rt(&rot, &t))
    }

    pub fn from_rt(rotation: &Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Pose(compose_rt(rotation.matrix(), &translation))
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose::from_rt(&Rotation3::identity(), t)
    }

    /// Rotation by `yaw` radians about +z followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Pose::from_rt(&Rotation3::from_axis_angle(&Vector3::z_axis(), yaw), translation)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation().transpose();
        Pose(compose_rt(&rt, &(-rt * self.translation())))
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose(self.0 * other.0)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Heading of the rotation block about +z (radians, in (−π, π]).
    pub fn yaw(&self) -> f64 {
        self.0[(1, 0)].atan2(self.0[(0, 0)])
    }

    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let mut rows = [[0.0; 4]; 4];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.0[(r, c)];
            }
        }
        rows
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl std::ops::Mul for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

fn compose_rt(r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}
