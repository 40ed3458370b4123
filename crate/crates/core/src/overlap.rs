//! Ground-truth overlap between scans with known poses, yaw labels, the
//! rotation-sweep baseline, and training-label generation.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PointCloud;
use crate::error::{Error, Result};
use crate::pose::Pose;
use crate::projection::{project, ProjectionConfig, ScanImage};

/// Overlap and relative-yaw label of an ordered scan pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapLabel {
    pub query_id: usize,
    pub ref_id: usize,
    pub overlap: f64,
    /// Integer degrees in `0..360`; only defined when the overlap exceeds the yaw threshold.
    pub yaw_gt: Option<u16>,
}

/// Projects the points of `cloud_1` (taken at `t_1`) into the sensor frame of `t_2`.
pub fn reproject(cloud_1: &PointCloud, t_1: &Pose, t_2: &Pose, cfg: &ProjectionConfig) -> ScanImage {
    let relative = t_2.inverse() * *t_1;
    project(&cloud_1.transformed(&relative), cfg)
}

/// Fraction of pixels, valid in both images, whose vertices lie within
/// `epsilon` meters of each other, relative to the smaller valid count.
/// Returns 0 when either image has no valid pixel.
pub fn overlap(v1p: &ScanImage, v2: &ScanImage, epsilon: f64) -> Result<f64> {
    if v1p.width() != v2.width() || v1p.height() != v2.height() {
        return Err(Error::Validation(format!(
            "image shapes differ: {}×{} vs {}×{}",
            v1p.height(),
            v1p.width(),
            v2.height(),
            v2.width()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Validation(format!("epsilon must be positive, got {epsilon}")));
    }
    let denom = v1p.valid_count().min(v2.valid_count());
    if denom == 0 {
        return Ok(0.0);
    }
    let hits = (0..v1p.valid.len())
        .filter(|&i| v1p.valid[i] && v2.valid[i] && (v1p.vertex[i] - v2.vertex[i]).norm() <= epsilon)
        .count();
    Ok(hits as f64 / denom as f64)
}

/// Heading of `T_1⁻¹·T_2` in whole degrees, rounded and wrapped to `0..360`.
pub fn ground_truth_yaw(t_1: &Pose, t_2: &Pose) -> u16 {
    let rel = t_1.inverse() * *t_2;
    let deg = rel.yaw().to_degrees().round() as i64;
    deg.rem_euclid(360) as u16
}

/// Pose-free overlap estimate: rotates `cloud_1` about the vertical axis in
/// `step_deg` increments (no translation) and keeps the best overlap against
/// `cloud_2`. Returns `(max overlap, angle in degrees)`; ties keep the smaller angle.
pub fn exhaustive_overlap(
    cloud_1: &PointCloud,
    cloud_2: &PointCloud,
    step_deg: u32,
    cfg: &ProjectionConfig,
    epsilon: f64,
) -> Result<(f64, u32)> {
    if step_deg == 0 || 360 % step_deg != 0 {
        return Err(Error::Validation(format!("step {step_deg}° does not divide 360°")));
    }
    let target = project(cloud_2, cfg);
    let mut best = (f64::NEG_INFINITY, 0);
    for angle in (0..360).step_by(step_deg as usize) {
        let rot = Pose::from_yaw((angle as f64).to_radians(), nalgebra::Vector3::zeros());
        let o = overlap(&project(&cloud_1.transformed(&rot), cfg), &target, epsilon)?;
        if o > best.0 {
            best = (o, angle);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    /// Pairs whose positions are within this distance (meters) are labeled exactly.
    pub gate_radius: f64,
    pub epsilon: f64,
    /// Yaw labels exist only above this overlap.
    pub yaw_min_overlap: f64,
    /// Far-apart negatives sampled per positive.
    pub negative_ratio: f64,
    pub seed: u64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig { gate_radius: 50.0, epsilon: 1.0, yaw_min_overlap: 0.3, negative_ratio: 1.0, seed: 0 }
    }
}

/// Labels the ordered pair `(i, j)`: overlap of scan `i` reprojected into scan `j`.
pub fn label_pair(
    cloud_i: &PointCloud,
    pose_i: &Pose,
    image_j: &ScanImage,
    pose_j: &Pose,
    ids: (usize, usize),
    label_cfg: &LabelConfig,
) -> Result<OverlapLabel> {
    let reprojected = reproject(cloud_i, pose_i, pose_j, &image_j.config);
    let o = overlap(&reprojected, image_j, label_cfg.epsilon)?;
    Ok(OverlapLabel {
        query_id: ids.0,
        ref_id: ids.1,
        overlap: o,
        yaw_gt: (o > label_cfg.yaw_min_overlap).then(|| ground_truth_yaw(pose_i, pose_j)),
    })
}

/// Labels every ordered pair within the distance gate (including `(i, i)`),
/// then adds seeded far-apart negatives with overlap 0. Output is sorted by
/// `(query_id, ref_id)`.
pub fn generate_labels(
    scans: &[PointCloud],
    poses: &[Pose],
    cfg: &ProjectionConfig,
    label_cfg: &LabelConfig,
) -> Result<Vec<OverlapLabel>> {
    if scans.len() != poses.len() {
        return Err(Error::Validation(format!("{} scans but {} poses", scans.len(), poses.len())));
    }
    let n = scans.len();
    let near = |i: usize, j: usize| (poses[i].translation() - poses[j].translation()).norm() <= label_cfg.gate_radius;
    let images: Vec<ScanImage> = scans.par_iter().map(|s| project(s, cfg)).collect();
    let mut labels: Vec<OverlapLabel> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| near(i, j))
                .map(|j| label_pair(&scans[i], &poses[i], &images[j], &poses[j], (i, j), label_cfg))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let positives = labels.iter().filter(|l| l.overlap > label_cfg.yaw_min_overlap).count();
    let far: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| !near(i, j))
        .collect();
    let wanted = ((positives as f64 * label_cfg.negative_ratio).round() as usize).min(far.len());
    let mut rng = ChaCha8Rng::seed_from_u64(label_cfg.seed);
    for k in sample(&mut rng, far.len(), wanted) {
        let (i, j) = far[k];
        labels.push(OverlapLabel { query_id: i, ref_id: j, overlap: 0.0, yaw_gt: None });
    }
    labels.sort_by_key(|l| (l.query_id, l.ref_id));
    Ok(labels)
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    query: usize,
    #[serde(rename = "ref")]
    reference: usize,
    overlap: f64,
    yaw: Option<u16>,
}

/// Writes `query,ref,overlap,yaw` rows; `yaw` is empty when undefined.
pub fn write_labels_csv(path: impl AsRef<Path>, labels: &[OverlapLabel]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for l in labels {
        w.serialize(LabelRow { query: l.query_id, reference: l.ref_id, overlap: l.overlap, yaw: l.yaw_gt })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<Vec<OverlapLabel>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: LabelRow = row?;
        if !(0.0..=1.0).contains(&row.overlap) || row.yaw.is_some_and(|y| y >= 360) {
            return Err(Error::malformed(path, format!("label row out of range: {},{}", row.query, row.reference)));
        }
        out.push(OverlapLabel { query_id: row.query, ref_id: row.reference, overlap: row.overlap, yaw_gt: row.yaw });
    }
    Ok(out)
}

/// Writes labels in a human-readable JSON array (debugging aid).
pub fn write_labels_json(mut out: impl Write, labels: &[OverlapLabel]) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, labels)?;
    Ok(())
}
