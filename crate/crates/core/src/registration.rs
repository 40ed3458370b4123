//! Projective point-to-plane ICP between two range images, with a
//! Huber-robustified Gauss-Newton solver and a covariance estimate.

use nalgebra::{Matrix6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::Pose;
use crate::projection::ScanImage;
use crate::uncertainty::{se3_exp, Cov6, TANGENT_ORDER};

/// Parameters of the estimated increment.
pub const DOF: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    /// Association gate on the point distance, meters.
    pub max_distance: f64,
    /// Association gate on the angle between normals, radians.
    pub max_normal_angle: f64,
    /// Huber threshold on the point-to-plane residual, meters.
    pub huber_kappa: f64,
    pub max_iterations: usize,
    /// Convergence threshold on `‖δ‖`.
    pub tolerance: f64,
    /// Largest accepted condition number of `JᵀWJ`.
    pub max_condition: f64,
    /// Halvings tried when a step increases the robust error.
    pub max_halvings: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_distance: 2.0,
            max_normal_angle: 30f64.to_radians(),
            huber_kappa: 0.3,
            max_iterations: 50,
            tolerance: 1e-6,
            max_condition: 1e12,
            max_halvings: 10,
        }
    }
}

/// Source point (source frame) matched to a target point and normal (target frame).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source_index: usize,
    pub source: Vector3<f64>,
    pub target: Vector3<f64>,
    pub normal: Vector3<f64>,
}

impl Correspondence {
    #[inline]
    pub fn residual(&self, t: &Pose) -> f64 {
        self.normal.dot(&(t.transform_point(&self.source) - self.target))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    /// Maps source-frame points into the target frame.
    pub transform: Pose,
    /// Tangent-space covariance, row-major, order given by `tangent_order`.
    pub covariance: [[f64; 6]; 6],
    pub tangent_order: [String; 6],
    pub iterations: usize,
    /// Sum of squared point-to-plane residuals at the final association.
    pub final_error: f64,
    pub correspondences: usize,
    pub converged: bool,
}

impl IcpResult {
    pub fn covariance_matrix(&self) -> Cov6 {
        Matrix6::from_fn(|i, j| self.covariance[i][j])
    }
}

/// Projects every valid source vertex, moved by `t`, into the target image and
/// keeps the pairs passing the distance and normal gates. Target pixels need a
/// normal; the normal gate is skipped when the source pixel has none.
pub fn associate(source: &ScanImage, target: &ScanImage, t: &Pose, cfg: &IcpConfig) -> Vec<Correspondence> {
    let rot = t.rotation();
    let cos_gate = cfg.max_normal_angle.cos();
    let mut out = Vec::new();
    for (i, p) in source.vertex.iter().enumerate() {
        if !source.valid[i] {
            continue;
        }
        let q = t.transform_point(p);
        let Some((u, v, _)) = target.config.pixel_of(&q) else { continue };
        let j = target.index(u, v);
        if !target.valid[j] || !target.has_normal(j) {
            continue;
        }
        if (q - target.vertex[j]).norm() > cfg.max_distance {
            continue;
        }
        if source.has_normal(i) && (rot * source.normal[i]).dot(&target.normal[j]) < cos_gate {
            continue;
        }
        out.push(Correspondence { source_index: i, source: *p, target: target.vertex[j], normal: target.normal[j] });
    }
    out
}

/// `E = Σ (nᵀ(T·p − q))²`.
pub fn point_to_plane_error(corrs: &[Correspondence], t: &Pose) -> f64 {
    corrs.iter().map(|c| c.residual(t).powi(2)).sum()
}

/// `min(1, κ/|r|)`.
#[inline]
pub fn huber_weight(r: f64, kappa: f64) -> f64 {
    if r.abs() <= kappa {
        1.0
    } else {
        kappa / r.abs()
    }
}

fn huber_rho(r: f64, kappa: f64) -> f64 {
    let a = r.abs();
    if a <= kappa {
        0.5 * r * r
    } else {
        kappa * (a - 0.5 * kappa)
    }
}

/// Robust objective `Σ ρ(r)` over fixed correspondences.
pub fn robust_error(corrs: &[Correspondence], t: &Pose, kappa: f64) -> f64 {
    corrs.iter().map(|c| huber_rho(c.residual(t), kappa)).sum()
}

/// Row of the Jacobian of `r` with respect to a left increment `exp(δ)·T`.
#[inline]
fn jacobian_row(c: &Correspondence, t: &Pose) -> Vector6<f64> {
    let q = t.transform_point(&c.source);
    let qn = q.cross(&c.normal);
    Vector6::new(c.normal.x, c.normal.y, c.normal.z, qn.x, qn.y, qn.z)
}

/// `JᵀWJ` and `JᵀWr` for the given per-correspondence weights.
fn normal_equations(corrs: &[Correspondence], t: &Pose, weights: &[f64]) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for (c, w) in corrs.iter().zip(weights) {
        let j = jacobian_row(c, t);
        let r = c.residual(t);
        h += j * j.transpose() * *w;
        g += j * (*w * r);
    }
    (h, g)
}

fn condition_number(h: &Matrix6<f64>) -> f64 {
    let eig = SymmetricEigen::new(*h).eigenvalues;
    let (min, max) = (eig.min(), eig.max());
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// One weighted Gauss-Newton increment: solves `(JᵀWJ)·δ = −JᵀWr`. The
/// update is `T ← exp(δ)·T`.
pub fn gauss_newton_step(corrs: &[Correspondence], t: &Pose, weights: &[f64], max_condition: f64) -> Result<Vector6<f64>> {
    let (h, g) = normal_equations(corrs, t, weights);
    let cond = condition_number(&h);
    if !(cond < max_condition) {
        return Err(Error::DegenerateGeometry(format!("normal equations have condition number {cond:.3e}")));
    }
    h.cholesky()
        .map(|c| -c.solve(&g))
        .ok_or_else(|| Error::DegenerateGeometry("normal equations are not positive definite".into()))
}

/// Per-iteration trace, for diagnostics and tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpIteration {
    pub correspondences: usize,
    /// Robust error before and after the accepted step, same correspondences.
    pub error_before: f64,
    pub error_after: f64,
    pub halvings: usize,
}

/// Estimates the transform taking `source` onto `target`, starting at `init`.
pub fn icp(source: &ScanImage, target: &ScanImage, init: &Pose, cfg: &IcpConfig) -> Result<IcpResult> {
    icp_traced(source, target, init, cfg).map(|(r, _)| r)
}

pub fn icp_traced(source: &ScanImage, target: &ScanImage, init: &Pose, cfg: &IcpConfig) -> Result<(IcpResult, Vec<IcpIteration>)> {
    let mut t = *init;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let corrs = associate(source, target, &t, cfg);
        if corrs.len() <= DOF {
            return Err(Error::InsufficientCorrespondences { found: corrs.len(), required: DOF + 1 });
        }
        let weights: Vec<f64> = corrs.iter().map(|c| huber_weight(c.residual(&t), cfg.huber_kappa)).collect();
        let delta = gauss_newton_step(&corrs, &t, &weights, cfg.max_condition)?;
        let before = robust_error(&corrs, &t, cfg.huber_kappa);
        let mut step = delta;
        let mut candidate = se3_exp(&step) * t;
        let mut after = robust_error(&corrs, &candidate, cfg.huber_kappa);
        let mut halvings = 0;
        while after > before && halvings < cfg.max_halvings {
            step *= 0.5;
            candidate = se3_exp(&step) * t;
            after = robust_error(&corrs, &candidate, cfg.huber_kappa);
            halvings += 1;
        }
        if after > before {
            // no descent along δ; keep the current estimate
            trace.push(IcpIteration { correspondences: corrs.len(), error_before: before, error_after: before, halvings });
            converged = true;
            break;
        }
        t = candidate;
        trace.push(IcpIteration { correspondences: corrs.len(), error_before: before, error_after: after, halvings });
        if step.norm() < cfg.tolerance {
            converged = true;
            break;
        }
    }
    let (covariance, final_error, n) = covariance_at(source, target, &t, cfg)?;
    Ok((
        IcpResult {
            transform: t,
            covariance: std::array::from_fn(|i| std::array::from_fn(|j| covariance[(i, j)])),
            tangent_order: TANGENT_ORDER.map(String::from),
            iterations,
            final_error,
            correspondences: n,
            converged,
        },
        trace,
    ))
}

/// `(1/K)·(E/(N − M))·(JᵀWJ)⁻¹` at `t` with `M = 6`. `K = m/c²` folds in
/// Huber's consistency correction `c = 1 + (M/N)·(1 − m)/m`, where `m` is the
/// share of residuals inside the Huber threshold.
fn covariance_at(source: &ScanImage, target: &ScanImage, t: &Pose, cfg: &IcpConfig) -> Result<(Cov6, f64, usize)> {
    let corrs = associate(source, target, t, cfg);
    let n = corrs.len();
    if n <= DOF {
        return Err(Error::InsufficientCorrespondences { found: n, required: DOF + 1 });
    }
    let residuals: Vec<f64> = corrs.iter().map(|c| c.residual(t)).collect();
    let weights: Vec<f64> = residuals.iter().map(|r| huber_weight(*r, cfg.huber_kappa)).collect();
    let e: f64 = residuals.iter().map(|r| r * r).sum();
    let inliers = residuals.iter().filter(|r| r.abs() <= cfg.huber_kappa).count();
    if inliers == 0 {
        return Err(Error::InsufficientCorrespondences { found: 0, required: DOF + 1 });
    }
    let m = inliers as f64 / n as f64;
    let c = 1.0 + (DOF as f64 / n as f64) * (1.0 - m) / m;
    let k = m / (c * c);
    let (h, _) = normal_equations(&corrs, t, &weights);
    let cond = condition_number(&h);
    if !(cond < cfg.max_condition) {
        return Err(Error::DegenerateGeometry(format!("normal equations have condition number {cond:.3e}")));
    }
    let h_inv = h
        .try_inverse()
        .ok_or_else(|| Error::DegenerateGeometry("normal equations are singular".into()))?;
    let cov = h_inv * (e / (n - DOF) as f64) / k;
    Ok(((cov + cov.transpose()) * 0.5, e, n))
}
