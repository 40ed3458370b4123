//! Spherical projection of scans into multi-channel range images.
//!
//! A point `(x, y, z)` at range `r` lands at
//! `u = ½·(1 − atan2(y, x)/π)·w` and `v = (1 − (asin(z/r) + f_up)/f)·h`
//! with `f = f_up + f_down`, both floored. Column `w` wraps to `0`; when several
//! points hit one pixel the nearest wins.

use nalgebra::{SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassProbs, PointCloud, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor_blob::TensorBlob;

const NORMAL_DEGENERATE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub width: usize,
    pub height: usize,
    /// Upper vertical field of view, radians.
    pub fov_up: f64,
    /// Lower vertical field of view, radians, stored positive.
    pub fov_down: f64,
    /// Points beyond this range (meters) are dropped.
    pub max_range: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            width: 900,
            height: 64,
            fov_up: 3f64.to_radians(),
            fov_down: 25f64.to_radians(),
            max_range: 75.0,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!("image extent {}×{} must be positive", self.height, self.width)));
        }
        if !(self.fov_up + self.fov_down > 0.0) {
            return Err(Error::Config("vertical field of view must be positive".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::Config("max_range must be positive".into()));
        }
        Ok(())
    }

    pub fn fov(&self) -> f64 {
        self.fov_up + self.fov_down
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Pixel `(u, v)` hit by a point together with its range, or `None` if the
    /// point is at the origin, beyond `max_range`, or outside the vertical field of view.
    #[inline]
    pub fn pixel_of(&self, p: &Vector3<f64>) -> Option<(usize, usize, f64)> {
        let r = p.norm();
        if !(r > 0.0) || r > self.max_range {
            return None;
        }
        let yaw = p.y.atan2(p.x);
        let pitch = (p.z / r).clamp(-1.0, 1.0).asin();
        let u = 0.5 * (1.0 - yaw / std::f64::consts::PI) * self.width as f64;
        let v = (1.0 - (pitch + self.fov_up) / self.fov()) * self.height as f64;
        let v = v.floor();
        if v < 0.0 || v >= self.height as f64 {
            return None;
        }
        let mut u = u.floor() as usize;
        if u >= self.width {
            u -= self.width;
        }
        Some((u, v as usize, r))
    }

    /// Unit ray through the center of pixel `(u, v)`, inverting the projection.
    pub fn ray_through(&self, u: f64, v: f64) -> Vector3<f64> {
        let yaw = std::f64::consts::PI * (1.0 - 2.0 * u / self.width as f64);
        let pitch = (1.0 - v / self.height as f64) * self.fov() - self.fov_up;
        Vector3::new(pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin())
    }
}

/// Multi-channel range image. Pixel `(u, v)` (column, row) lives at `v·w + u`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanImage {
    pub config: ProjectionConfig,
    /// Sensor-frame point per pixel; zero where invalid.
    pub vertex: Vec<Vector3<f64>>,
    /// Range per pixel; zero where invalid.
    pub range: Vec<f64>,
    pub valid: Vec<bool>,
    /// Unit normal facing the sensor; zero where no normal could be estimated.
    pub normal: Vec<Vector3<f64>>,
    pub intensity: Vec<f64>,
    /// Class distribution of the winning point, when the cloud carried one.
    pub class_probs: Option<Vec<ClassProbs>>,
    /// Compressed class distribution (see [`PcaModel`]).
    pub semantic: Option<Vec<[f64; 3]>>,
}

impl ScanImage {
    pub fn empty(config: ProjectionConfig) -> Self {
        let n = config.pixel_count();
        ScanImage {
            config,
            vertex: vec![Vector3::zeros(); n],
            range: vec![0.0; n],
            valid: vec![false; n],
            normal: vec![Vector3::zeros(); n],
            intensity: vec![0.0; n],
            class_probs: None,
            semantic: None,
        }
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.config.width + u
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    #[inline]
    pub fn has_normal(&self, idx: usize) -> bool {
        self.normal[idx] != Vector3::zeros()
    }

    /// The valid vertices as a point cloud (intensities carried along).
    pub fn to_cloud(&self) -> PointCloud {
        let mut points = Vec::new();
        let mut remission = Vec::new();
        for i in 0..self.valid.len() {
            if self.valid[i] {
                points.push(self.vertex[i]);
                remission.push(self.intensity[i] as f32);
            }
        }
        PointCloud { points, remission, semantics: None }
    }

    /// Rolls every channel `k` columns to the right: pixel `u` moves to `u + k (mod w)`.
    pub fn roll_columns(&self, k: usize) -> ScanImage {
        let w = self.width();
        let h = self.height();
        let mut out = self.clone();
        for v in 0..h {
            for u in 0..w {
                let src = v * w + u;
                let dst = v * w + (u + k) % w;
                out.vertex[dst] = self.vertex[src];
                out.range[dst] = self.range[src];
                out.valid[dst] = self.valid[src];
                out.normal[dst] = self.normal[src];
                out.intensity[dst] = self.intensity[src];
                if let (Some(o), Some(s)) = (out.class_probs.as_mut(), self.class_probs.as_ref()) {
                    o[dst] = s[src];
                }
                if let (Some(o), Some(s)) = (out.semantic.as_mut(), self.semantic.as_ref()) {
                    o[dst] = s[src];
                }
            }
        }
        out
    }

    fn channel_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["range", "x", "y", "z", "nx", "ny", "nz", "intensity"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if self.semantic.is_some() {
            names.extend(["s0", "s1", "s2"].iter().map(|s| s.to_string()));
        }
        names
    }

    /// Packs all channels into an `h × w × C` blob.
    pub fn to_blob(&self) -> TensorBlob {
        let names = self.channel_names();
        let c = names.len();
        let mut data = Vec::with_capacity(self.config.pixel_count() * c);
        for i in 0..self.config.pixel_count() {
            let (p, n) = (self.vertex[i], self.normal[i]);
            data.extend_from_slice(&[
                self.range[i] as f32,
                p.x as f32,
                p.y as f32,
                p.z as f32,
                n.x as f32,
                n.y as f32,
                n.z as f32,
                self.intensity[i] as f32,
            ]);
            if let Some(s) = &self.semantic {
                data.extend(s[i].iter().map(|v| *v as f32));
            }
        }
        TensorBlob { shape: vec![self.height(), self.width(), c], channels: names, data }
    }

    pub fn from_blob(blob: &TensorBlob, config: ProjectionConfig) -> Result<ScanImage> {
        if blob.shape.len() != 3 || blob.shape[0] != config.height || blob.shape[1] != config.width {
            return Err(Error::Shape(format!(
                "blob shape {:?} does not match {}×{} projection",
                blob.shape, config.height, config.width
            )));
        }
        let c = blob.shape[2];
        let ch = |name: &str| {
            blob.channel(name)
                .ok_or_else(|| Error::Shape(format!("scan blob lacks channel `{name}`")))
        };
        let (ir, ix, iy, iz) = (ch("range")?, ch("x")?, ch("y")?, ch("z")?);
        let (inx, iny, inz, ii) = (ch("nx")?, ch("ny")?, ch("nz")?, ch("intensity")?);
        let sem = match (blob.channel("s0"), blob.channel("s1"), blob.channel("s2")) {
            (Some(a), Some(b), Some(d)) => Some([a, b, d]),
            _ => None,
        };
        let mut img = ScanImage::empty(config);
        if sem.is_some() {
            img.semantic = Some(vec![[0.0; 3]; config.pixel_count()]);
        }
        for i in 0..config.pixel_count() {
            let px = &blob.data[i * c..(i + 1) * c];
            img.range[i] = px[ir] as f64;
            img.valid[i] = px[ir] > 0.0;
            img.vertex[i] = Vector3::new(px[ix] as f64, px[iy] as f64, px[iz] as f64);
            img.normal[i] = Vector3::new(px[inx] as f64, px[iny] as f64, px[inz] as f64);
            img.intensity[i] = px[ii] as f64;
            if let (Some(idx), Some(s)) = (sem, img.semantic.as_mut()) {
                s[i] = [px[idx[0]] as f64, px[idx[1]] as f64, px[idx[2]] as f64];
            }
        }
        Ok(img)
    }
}

/// Projects a cloud into a range image. Out-of-range and out-of-view points
/// are dropped; on equal range the first point in input order is kept.
pub fn project(cloud: &PointCloud, cfg: &ProjectionConfig) -> ScanImage {
    let mut img = ScanImage::empty(*cfg);
    if cloud.semantics.is_some() {
        img.class_probs = Some(vec![[0.0; NUM_CLASSES]; cfg.pixel_count()]);
    }
    for (i, p) in cloud.points.iter().enumerate() {
        let Some((u, v, r)) = cfg.pixel_of(p) else { continue };
        let idx = v * cfg.width + u;
        if img.valid[idx] && img.range[idx] <= r {
            continue;
        }
        img.valid[idx] = true;
        img.range[idx] = r;
        img.vertex[idx] = *p;
        img.intensity[idx] = cloud.remission[i] as f64;
        if let (Some(dst), Some(src)) = (img.class_probs.as_mut(), cloud.semantics.as_ref()) {
            dst[idx] = src[i];
        }
    }
    img
}

/// Fills the normal channel from right/down forward differences, with the
/// column index wrapping around. Normals are flipped to face the sensor.
pub fn compute_normals(img: &mut ScanImage) {
    let (w, h) = (img.width(), img.height());
    for v in 0..h {
        for u in 0..w {
            let idx = v * w + u;
            img.normal[idx] = Vector3::zeros();
            if !img.valid[idx] || v + 1 >= h {
                continue;
            }
            let right = v * w + (u + 1) % w;
            let down = (v + 1) * w + u;
            if !img.valid[right] || !img.valid[down] {
                continue;
            }
            let p = img.vertex[idx];
            let n = (img.vertex[right] - p).cross(&(img.vertex[down] - p));
            let norm = n.norm();
            if norm < NORMAL_DEGENERATE {
                continue;
            }
            let mut n = n / norm;
            if n.dot(&p) > 0.0 {
                n = -n;
            }
            img.normal[idx] = n;
        }
    }
}

/// Linear compression of class distributions to three components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: [f64; NUM_CLASSES],
    /// Column `k` is the `k`-th principal axis.
    pub basis: [[f64; NUM_CLASSES]; 3],
    /// Variance along each retained axis.
    pub eigenvalues: [f64; 3],
    pub total_variance: f64,
}

impl PcaModel {
    pub fn explained_variance_ratio(&self) -> f64 {
        if self.total_variance <= 0.0 {
            return 0.0;
        }
        self.eigenvalues.iter().sum::<f64>() / self.total_variance
    }

    pub fn compress(&self, p: &ClassProbs) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (k, axis) in self.basis.iter().enumerate() {
            out[k] = axis.iter().zip(p.iter().zip(&self.mean)).map(|(b, (x, m))| b * (*x as f64 - m)).sum();
        }
        out
    }

    pub fn save_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

const PCA_RANK_TOL: f64 = 1e-12;

/// Top-3 principal axes of a corpus of class distributions, ordered by
/// descending variance, each signed so its largest-magnitude entry is positive.
pub fn fit_pca(corpus: &[ClassProbs]) -> Result<PcaModel> {
    if corpus.len() < NUM_CLASSES {
        return Err(Error::Validation(format!(
            "PCA corpus has {} vectors, need at least {NUM_CLASSES}",
            corpus.len()
        )));
    }
    type V20 = SVector<f64, NUM_CLASSES>;
    type M20 = SMatrix<f64, NUM_CLASSES, NUM_CLASSES>;
    let n = corpus.len() as f64;
    let mut mean = V20::zeros();
    for p in corpus {
        mean += V20::from_iterator(p.iter().map(|v| *v as f64));
    }
    mean /= n;
    let mut cov = M20::zeros();
    for p in corpus {
        let d = V20::from_iterator(p.iter().map(|v| *v as f64)) - mean;
        cov += d * d.transpose();
    }
    cov /= n - 1.0;
    let total_variance = cov.trace();
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let rank = eig.eigenvalues.iter().filter(|l| **l > PCA_RANK_TOL).count();
    if rank < 3 {
        return Err(Error::Validation(format!("degenerate corpus: covariance rank {rank} < 3")));
    }
    let mut basis = [[0.0; NUM_CLASSES]; 3];
    let mut eigenvalues = [0.0; 3];
    for k in 0..3 {
        let col = eig.eigenvectors.column(order[k]);
        let pivot = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap();
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (i, b) in basis[k].iter_mut().enumerate() {
            *b = sign * col[i];
        }
        eigenvalues[k] = eig.eigenvalues[order[k]];
    }
    let mut mean_arr = [0.0; NUM_CLASSES];
    mean_arr.copy_from_slice(mean.as_slice());
    Ok(PcaModel { mean: mean_arr, basis, eigenvalues, total_variance })
}

/// Fills the compressed semantic channel: `basisᵀ·(p − mean)` for every valid
/// pixel, zero elsewhere. A no-op when the image carries no class distributions.
pub fn compress_semantics(img: &mut ScanImage, model: &PcaModel) {
    let Some(probs) = &img.class_probs else { return };
    let sem = probs
        .iter()
        .zip(&img.valid)
        .map(|(p, valid)| if *valid { model.compress(p) } else { [0.0; 3] })
        .collect();
    img.semantic = Some(sem);
}

/// Projection, normals and (given a model) compressed semantics in one go.
pub fn preprocess(cloud: &PointCloud, cfg: &ProjectionConfig, pca: Option<&PcaModel>) -> ScanImage {
    let mut img = project(cloud, cfg);
    compute_normals(&mut img);
    if let Some(model) = pca {
        compress_semantics(&mut img, model);
    }
    img
}

/// Deterministic uniform subsample of at most `max` vectors (stride sampling).
pub fn subsample_corpus(all: &[ClassProbs], max: usize) -> Vec<ClassProbs> {
    if all.len() <= max || max == 0 {
        return all.to_vec();
    }
    (0..max).map(|i| all[i * all.len() / max]).collect()
}
