//! Poses with tangent-space covariance, SE(3) exp/log and Mahalanobis gating.
//!
//! Tangent vectors are ordered `(tx, ty, tz, rx, ry, rz)` everywhere.
//! Perturbations act from the left: `T = exp(ξ)·T̄`.

use nalgebra::{Cholesky, Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::Pose;

pub type Tangent = Vector6<f64>;
pub type Cov6 = Matrix6<f64>;

/// Name of every tangent component, in storage order.
pub const TANGENT_ORDER: [&str; 6] = ["tx", "ty", "tz", "rx", "ry", "rz"];

const PSD_TOL: f64 = 1e-9;
const SMALL_ANGLE: f64 = 1e-5;
/// Below this angle the series forms of the V coefficients are used.
const SERIES_ANGLE: f64 = 1e-3;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// Rodrigues rotation and the left Jacobian `V` for `ω`.
fn so3_exp_and_v(w: &Vector3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let theta = w.norm();
    let k = skew(w);
    let k2 = k * k;
    let (a, b, c) = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        (1.0 - t2 / 6.0 + t4 / 120.0, 0.5 - t2 / 24.0 + t4 / 720.0, 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0)
    } else {
        let (s, co) = theta.sin_cos();
        (s / theta, (1.0 - co) / (theta * theta), (theta - s) / (theta * theta * theta))
    };
    let r = Matrix3::identity() + k * a + k2 * b;
    let v = Matrix3::identity() + k * b + k2 * c;
    (r, v)
}

/// Exponential map `se(3) → SE(3)`.
pub fn se3_exp(xi: &Tangent) -> Pose {
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let w = Vector3::new(xi[3], xi[4], xi[5]);
    let (r, v) = so3_exp_and_v(&w);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(v * rho));
    Pose::from_matrix(m).expect("exponential of a finite tangent vector is a valid pose")
}

/// Rotation vector of `r`; angles above 90° read the axis from the symmetric
/// part, which stays accurate up to and including π.
fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let anti = vee(r);
    let s = anti.norm();
    let theta = s.atan2(c);
    if theta < SMALL_ANGLE {
        return anti * (1.0 + theta * theta / 6.0);
    }
    if c >= 0.0 {
        return anti * (theta / s);
    }
    // (R + Rᵀ)/2 − cos θ·I = (1 − cos θ)·a·aᵀ
    let m = (r + r.transpose()) * 0.5 - Matrix3::identity() * c;
    let m = m / (1.0 - c);
    let i = (0..3).max_by(|&x, &y| m[(x, x)].total_cmp(&m[(y, y)])).expect("three entries");
    let mut axis = m.column(i) / m[(i, i)].sqrt();
    if axis.dot(&anti) < 0.0 {
        axis = -axis;
    }
    axis.normalize() * theta
}

/// Logarithm map `SE(3) → se(3)`.
pub fn se3_log(t: &Pose) -> Tangent {
    let w = so3_log(&t.rotation());
    let theta = w.norm();
    let k = skew(&w);
    let coeff = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let (s, c) = theta.sin_cos();
        (1.0 - theta * s / (2.0 * (1.0 - c))) / (theta * theta)
    };
    let v_inv = Matrix3::identity() - k * 0.5 + k * k * coeff;
    let rho = v_inv * t.translation();
    Vector6::new(rho.x, rho.y, rho.z, w.x, w.y, w.z)
}

/// Adjoint of `t` acting on left tangent vectors: `exp(Ad·ξ)·T = T·exp(ξ)`.
pub fn adjoint(t: &Pose) -> Matrix6<f64> {
    let r = t.rotation();
    let mut ad = Matrix6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(&t.translation()) * r));
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    ad
}

/// Checks symmetry and positive semi-definiteness within 10⁻⁹.
pub fn check_covariance(cov: &Cov6) -> Result<()> {
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("covariance has non-finite entries".into()));
    }
    let asym = (cov - cov.transpose()).amax();
    if asym > PSD_TOL * cov.amax().max(1.0) {
        return Err(Error::Validation(format!("covariance is not symmetric (max deviation {asym:e})")));
    }
    let sym = (cov + cov.transpose()) * 0.5;
    let min_eig = sym.symmetric_eigenvalues().min();
    if min_eig < -PSD_TOL * cov.amax().max(1.0) {
        return Err(Error::Validation(format!("covariance is not positive semi-definite (eigenvalue {min_eig:e})")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseWithCovRepr", into = "PoseWithCovRepr")]
pub struct PoseWithCov {
    pub mean: Pose,
    pub cov: Cov6,
}

#[derive(Serialize, Deserialize)]
struct PoseWithCovRepr {
    mean: Pose,
    /// Row-major 6×6.
    cov: [[f64; 6]; 6],
    tangent_order: [String; 6],
}

impl TryFrom<PoseWithCovRepr> for PoseWithCov {
    type Error = Error;
    fn try_from(r: PoseWithCovRepr) -> Result<Self> {
        if r.tangent_order.iter().zip(TANGENT_ORDER).any(|(a, b)| a != b) {
            return Err(Error::Validation(format!("unexpected tangent order {:?}", r.tangent_order)));
        }
        PoseWithCov::new(r.mean, Matrix6::from_fn(|i, j| r.cov[i][j]))
    }
}

impl From<PoseWithCov> for PoseWithCovRepr {
    fn from(p: PoseWithCov) -> Self {
        PoseWithCovRepr {
            mean: p.mean,
            cov: std::array::from_fn(|i| std::array::from_fn(|j| p.cov[(i, j)])),
            tangent_order: TANGENT_ORDER.map(String::from),
        }
    }
}

impl PoseWithCov {
    pub fn new(mean: Pose, cov: Cov6) -> Result<Self> {
        check_covariance(&cov)?;
        Ok(PoseWithCov { mean, cov })
    }

    pub fn certain(mean: Pose) -> Self {
        PoseWithCov { mean, cov: Matrix6::zeros() }
    }

    /// `a ⊕ b`: mean `a·b`, covariance `Σa + Jᵀ·Σb·J` with `J = Ad(a)ᵀ`.
    pub fn compose(&self, b: &PoseWithCov) -> PoseWithCov {
        let j = adjoint(&self.mean).transpose();
        let cov = self.cov + j.transpose() * b.cov * j;
        PoseWithCov { mean: self.mean * b.mean, cov: (cov + cov.transpose()) * 0.5 }
    }
}

/// `√(Δξᵀ Σ⁻¹ Δξ)` with `Δξ = log(T1⁻¹·T2)`. A singular `Σ` is regularized
/// by `10⁻⁹·I` before giving up.
pub fn mahalanobis(t1: &Pose, t2: &Pose, cov: &Cov6) -> Result<f64> {
    let dxi = se3_log(&(t1.inverse() * *t2));
    mahalanobis_tangent(&dxi, cov)
}

pub fn mahalanobis_tangent(dxi: &Tangent, cov: &Cov6) -> Result<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let chol = Cholesky::new(sym).or_else(|| Cholesky::new(sym + Matrix6::identity() * 1e-9));
    let Some(chol) = chol else {
        return Err(Error::Validation("covariance is not positive definite even after regularization".into()));
    };
    let d2 = dxi.dot(&chol.solve(dxi));
    Ok(d2.max(0.0).sqrt())
}
