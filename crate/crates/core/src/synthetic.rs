//! Ray-cast synthetic LiDAR scenes: a ground plane plus boxes and vertical
//! cylinders. One ray is cast through the center of every pixel of a
//! projection grid, so a sensor yawed by whole columns sees an exactly
//! column-rolled image.

use std::path::Path;

use nalgebra::{Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{save_calibration, save_poses, save_scan, save_semantics, ClassProbs, PointCloud, SequencePaths, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::pose::Pose;
use crate::overlap::{label_pair, LabelConfig, OverlapLabel};
use crate::projection::{preprocess, ProjectionConfig, ScanImage};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Horizontal plane at height `z`.
    Ground { z: f64 },
    /// Box with half extents `half`, rotated by `yaw` about its vertical axis.
    Cuboid { center: Vector3<f64>, half: Vector3<f64>, yaw: f64 },
    /// Vertical cylinder between `z_min` and `z_max`.
    Cylinder { x: f64, y: f64, radius: f64, z_min: f64, z_max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    /// Class distribution reported for every point on this primitive.
    pub probs: ClassProbs,
    pub remission: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

fn intersect(shape: &Shape, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    const EPS: f64 = 1e-9;
    match *shape {
        Shape::Ground { z } => {
            if d.z.abs() < EPS {
                return None;
            }
            let t = (z - o.z) / d.z;
            (t > EPS).then_some(t)
        }
        Shape::Cuboid { center, half, yaw } => {
            let (s, c) = yaw.sin_cos();
            let rel = o - center;
            // into the box frame
            let lo = Vector3::new(c * rel.x + s * rel.y, -s * rel.x + c * rel.y, rel.z);
            let ld = Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z);
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            for i in 0..3 {
                if ld[i].abs() < EPS {
                    if lo[i].abs() > half[i] {
                        return None;
                    }
                    continue;
                }
                let a = (-half[i] - lo[i]) / ld[i];
                let b = (half[i] - lo[i]) / ld[i];
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
            if t0 > t1 || t1 <= EPS {
                return None;
            }
            Some(if t0 > EPS { t0 } else { t1 })
        }
        Shape::Cylinder { x, y, radius, z_min, z_max } => {
            let (px, py) = (o.x - x, o.y - y);
            let a = d.x * d.x + d.y * d.y;
            if a < EPS {
                return None;
            }
            let b = 2.0 * (px * d.x + py * d.y);
            let c = px * px + py * py - radius * radius;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)].into_iter().find(|&t| {
                let z = o.z + t * d.z;
                t > EPS && z >= z_min && z <= z_max
            })
        }
    }
}

/// Soft class distribution peaked at `class`.
pub fn class_distribution(class: usize) -> ClassProbs {
    let mut p = [0.1 / (NUM_CLASSES - 1) as f32; NUM_CLASSES];
    p[class % NUM_CLASSES] = 0.9;
    p
}

/// Peaked distribution with random mass spread over the other classes.
pub fn jittered_distribution(class: usize, rng: &mut impl Rng) -> ClassProbs {
    let mut p = [0f32; NUM_CLASSES];
    for v in p.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    let rest: f32 = p.iter().sum::<f32>() - p[class % NUM_CLASSES];
    let peak = rng.random_range(0.6..0.95);
    for (i, v) in p.iter_mut().enumerate() {
        *v = if i == class % NUM_CLASSES { peak } else { *v / rest * (1.0 - peak) };
    }
    p
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>) -> Self {
        Scene { primitives }
    }

    /// Nearest hit along a world-frame ray.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, &Primitive)> {
        let mut best: Option<(f64, &Primitive)> = None;
        for p in &self.primitives {
            if let Some(t) = intersect(&p.shape, origin, dir) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, p));
                }
            }
        }
        best
    }

    /// Scan from a sensor at `pose` (sensor → world), one ray per pixel
    /// center, points in the sensor frame. Hits beyond `max_range` are
    /// dropped. With `noise`, Gaussian noise of that standard deviation is
    /// added to every range.
    pub fn scan(&self, pose: &Pose, cfg: &ProjectionConfig, noise: Option<(f64, &mut dyn rand::RngCore)>) -> PointCloud {
        let origin = pose.translation();
        let rot = pose.rotation();
        let mut noise = noise.map(|(sigma, rng)| (Normal::new(0.0, sigma.max(0.0)).expect("finite sigma"), rng));
        let mut points = Vec::new();
        let mut remission = Vec::new();
        let mut semantics = Vec::new();
        for v in 0..cfg.height {
            for u in 0..cfg.width {
                let d = cfg.ray_through(u as f64 + 0.5, v as f64 + 0.5);
                let Some((t, prim)) = self.raycast(&origin, &(rot * d)) else { continue };
                if t > cfg.max_range {
                    continue;
                }
                let t = match noise.as_mut() {
                    Some((dist, rng)) => t + dist.sample(rng),
                    None => t,
                };
                if t <= 0.0 {
                    continue;
                }
                points.push(d * t);
                remission.push(prim.remission);
                semantics.push(prim.probs);
            }
        }
        PointCloud { points, remission, semantics: Some(semantics) }
    }

    /// Ground plane at `z = 0` plus randomly placed boxes and poles inside
    /// `[-extent, extent]²`, keeping a `clearance` disc around every point in
    /// `keep_clear` free of obstacles.
    pub fn random_structured(rng: &mut impl Rng, extent: f64, obstacles: usize, keep_clear: &[Vector3<f64>], clearance: f64) -> Scene {
        let mut prims = vec![Primitive { shape: Shape::Ground { z: 0.0 }, probs: jittered_distribution(9, rng), remission: 0.3 }];
        while prims.len() < obstacles + 1 {
            let x = rng.random_range(-extent..extent);
            let y = rng.random_range(-extent..extent);
            if keep_clear.iter().any(|c| (c.x - x).hypot(c.y - y) < clearance) {
                continue;
            }
            prims.push(random_obstacle(rng, x, y));
        }
        Scene::new(prims)
    }

    /// The same scene with extra primitives.
    pub fn with(&self, extra: &[Primitive]) -> Scene {
        Scene::new(self.primitives.iter().chain(extra).copied().collect())
    }
}

/// Box (60%) or pole standing on the ground at `(x, y)`.
pub fn random_obstacle(rng: &mut impl Rng, x: f64, y: f64) -> Primitive {
    if rng.random_bool(0.6) {
        let half = Vector3::new(rng.random_range(0.5..4.0), rng.random_range(0.5..4.0), rng.random_range(1.0..4.0));
        Primitive {
            shape: Shape::Cuboid { center: Vector3::new(x, y, half.z), half, yaw: rng.random_range(0.0..std::f64::consts::PI) },
            probs: jittered_distribution(13, rng),
            remission: rng.random_range(0.2..0.9),
        }
    } else {
        Primitive {
            shape: Shape::Cylinder { x, y, radius: rng.random_range(0.2..1.0), z_min: 0.0, z_max: rng.random_range(3.0..8.0) },
            probs: jittered_distribution(18, rng),
            remission: rng.random_range(0.2..0.9),
        }
    }
}

/// Thin 4 m high wall at `distance` from `center`, facing it at azimuth
/// `azimuth` and covering `span` radians of its view.
pub fn occluding_wall(center: Vector3<f64>, azimuth: f64, distance: f64, span: f64) -> Primitive {
    let (s, c) = azimuth.sin_cos();
    Primitive {
        shape: Shape::Cuboid {
            center: Vector3::new(center.x + distance * c, center.y + distance * s, 2.0),
            half: Vector3::new(distance * (span * 0.5).tan(), 0.15, 2.0),
            yaw: azimuth + std::f64::consts::FRAC_PI_2,
        },
        probs: class_distribution(14),
        remission: 0.5,
    }
}

/// Sensor height above the ground used by the synthetic trajectories.
pub const SENSOR_HEIGHT: f64 = 1.73;

/// Closed rectangular loop of `n` poses with `side` meters per edge, heading
/// along the direction of travel; the second half of the sequence revisits
/// the first half's places with a lateral offset.
pub fn loop_trajectory(n: usize, side: f64, lateral_offset: f64) -> Vec<Pose> {
    let perimeter = 4.0 * side;
    let half = n / 2;
    (0..n)
        .map(|i| {
            let (lap_pos, offset) = if i < half {
                (i as f64 / half.max(1) as f64, 0.0)
            } else {
                ((i - half) as f64 / (n - half).max(1) as f64, lateral_offset)
            };
            let s = lap_pos * perimeter;
            let edge = ((s / side).floor() as usize).min(3);
            let along = s - edge as f64 * side;
            let (x, y, heading) = match edge {
                0 => (along, 0.0, 0.0),
                1 => (side, along, 90f64),
                2 => (side - along, side, 180f64),
                _ => (0.0, side - along, 270f64),
            };
            // inward normal of the current edge for the lateral shift
            let h = heading.to_radians();
            let (nx, ny) = (-h.sin(), h.cos());
            Pose::from_yaw(h, Vector3::new(x + offset * nx, y + offset * ny, SENSOR_HEIGHT))
        })
        .collect()
}

/// A made-up LiDAR→camera extrinsic used when writing synthetic KITTI-style sequences.
pub fn synthetic_calibration() -> Matrix4<f64> {
    // camera z forward, x right, y down
    Matrix4::new(
        0.0, -1.0, 0.0, 0.0,
        0.0, 0.0, -1.0, -0.08,
        1.0, 0.0, 0.0, -0.27,
        0.0, 0.0, 0.0, 1.0,
    )
}

/// Writes scans, per-point class probabilities, poses and calibration in
/// the KITTI odometry layout under `root`.
pub fn write_kitti_sequence(root: &Path, sequence: &str, scene: &Scene, poses: &[Pose], cfg: &ProjectionConfig) -> Result<SequencePaths> {
    if poses.is_empty() {
        return Err(Error::Validation("synthetic sequence needs at least one pose".into()));
    }
    let paths = SequencePaths::new(root, sequence);
    for dir in [paths.velodyne_dir(), paths.probs_dir(), root.join("poses")] {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, pose) in poses.iter().enumerate() {
        let cloud = scene.scan(pose, cfg, None);
        save_scan(paths.scan_file(i), &cloud)?;
        save_semantics(paths.probs_file(i), cloud.semantics.as_deref().unwrap_or(&[]))?;
    }
    let tr = synthetic_calibration();
    save_calibration(paths.calib_file(), &tr)?;
    save_poses(root.join("poses").join(format!("{sequence}.txt")), poses, &tr)?;
    Ok(paths)
}

/// Desk-scale labeled dataset for training and testing the network. Scans
/// are grouped into places: scans of one place lie within `place_jitter` of
/// each other at whole-degree headings, and places are at least
/// `place_separation` apart. Near wall segments and optional transient
/// obstacles block part of each scan's view, so same-place pairs cover a
/// range of overlaps.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub places: usize,
    pub scans_per_place: usize,
    /// Total labeled pairs: every same-place pair, topped up with random cross-place pairs.
    pub pairs: usize,
    pub place_jitter: f64,
    pub place_separation: f64,
    /// Scan headings lie within this many degrees of a per-place heading
    /// (180 gives uniform headings).
    pub heading_spread: f64,
    /// Upper bound on the transient obstacles added around each scan.
    pub max_transients: usize,
    /// Upper bound on the near wall segments blocking part of each scan's view.
    pub max_walls: usize,
    pub projection: ProjectionConfig,
    pub label: LabelConfig,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            places: 6,
            scans_per_place: 4,
            pairs: 200,
            place_jitter: 0.2,
            place_separation: 45.0,
            heading_spread: 180.0,
            max_transients: 0,
            max_walls: 3,
            projection: compact_projection(),
            label: LabelConfig::default(),
            seed: 0,
        }
    }
}

/// `16 × 360` grid (one column per degree) with the default field of view.
pub fn compact_projection() -> ProjectionConfig {
    ProjectionConfig { width: 360, height: 16, ..Default::default() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyData {
    /// Static part of the world.
    pub scene: Scene,
    /// Obstacles present only in the corresponding scan.
    pub transients: Vec<Vec<Primitive>>,
    pub poses: Vec<Pose>,
    /// Place index of every scan.
    pub place_of: Vec<usize>,
    pub clouds: Vec<PointCloud>,
    /// Projected images with normals (no compressed semantics).
    pub images: Vec<ScanImage>,
    pub labels: Vec<OverlapLabel>,
}

fn place_centers(rng: &mut impl Rng, count: usize, separation: f64) -> Vec<Vector3<f64>> {
    let mut radius = separation * (count as f64).sqrt();
    let mut centers: Vec<Vector3<f64>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while centers.len() < count {
        let (r, a) = (radius * rng.random_range(0.0f64..1.0).sqrt(), rng.random_range(0.0..std::f64::consts::TAU));
        let c = Vector3::new(r * a.cos(), r * a.sin(), 0.0);
        if centers.iter().all(|o| (o - c).norm() >= separation) {
            centers.push(c);
        }
        attempts += 1;
        if attempts % 1000 == 0 {
            radius *= 1.2;
        }
    }
    centers
}

/// Builds the scans and labels every same-place ordered pair (including
/// `(i, i)`) plus random cross-place pairs up to `cfg.pairs`, each with its
/// exact overlap.
pub fn toy_dataset(cfg: &ToyConfig) -> Result<ToyData> {
    let scans = cfg.places * cfg.scans_per_place;
    if scans == 0 || cfg.pairs == 0 || cfg.pairs > scans * scans {
        return Err(Error::Validation(format!("cannot draw {} pairs from {} scans", cfg.pairs, scans)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = place_centers(&mut rng, cfg.places, cfg.place_separation);
    let place_of: Vec<usize> = (0..scans).map(|i| i / cfg.scans_per_place).collect();
    let spread = cfg.heading_spread.clamp(0.0, 180.0).round() as i32;
    let base: Vec<i32> = (0..cfg.places).map(|_| rng.random_range(0..360)).collect();
    let poses: Vec<Pose> = place_of
        .iter()
        .map(|&p| {
            let (r, a) = (cfg.place_jitter * rng.random_range(0.0f64..1.0).sqrt(), rng.random_range(0.0..std::f64::consts::TAU));
            let heading = ((base[p] + rng.random_range(-spread..=spread)).rem_euclid(360) as f64).to_radians();
            Pose::from_yaw(heading, centers[p] + Vector3::new(r * a.cos(), r * a.sin(), SENSOR_HEIGHT))
        })
        .collect();
    let extent = centers.iter().map(|c| c.x.abs().max(c.y.abs())).fold(0.0, f64::max) + 40.0;
    let obstacles = (extent * extent / 30.0) as usize;
    let scene = Scene::random_structured(&mut rng, extent, obstacles, &centers, 2.5 + cfg.place_jitter);
    let mut transients: Vec<Vec<Primitive>> = Vec::with_capacity(poses.len());
    for pose in &poses {
        let c = pose.translation();
        let mut extra = Vec::new();
        for _ in 0..rng.random_range(0..=cfg.max_transients) {
            let (r, a) = (rng.random_range(3.0..12.0), rng.random_range(0.0..std::f64::consts::TAU));
            extra.push(random_obstacle(&mut rng, c.x + r * a.cos(), c.y + r * a.sin()));
        }
        for _ in 0..rng.random_range(0..=cfg.max_walls) {
            let (r, a) = (rng.random_range(2.5..4.0), rng.random_range(0.0..std::f64::consts::TAU));
            extra.push(occluding_wall(c, a, r, rng.random_range(20f64..80.0).to_radians()));
        }
        transients.push(extra);
    }
    let clouds: Vec<PointCloud> =
        poses.par_iter().zip(&transients).map(|(p, t)| scene.with(t).scan(p, &cfg.projection, None)).collect();
    let images: Vec<ScanImage> = clouds.par_iter().map(|c| preprocess(c, &cfg.projection, None)).collect();

    let (mut same, mut cross) = (Vec::new(), Vec::new());
    for i in 0..scans {
        for j in 0..scans {
            if place_of[i] == place_of[j] { same.push((i, j)) } else { cross.push((i, j)) }
        }
    }
    same.truncate(cfg.pairs);
    let extra = (cfg.pairs - same.len()).min(cross.len());
    let mut chosen = same;
    chosen.extend(rand::seq::index::sample(&mut rng, cross.len(), extra).into_iter().map(|k| cross[k]));
    let mut labels: Vec<OverlapLabel> = chosen
        .par_iter()
        .map(|&(i, j)| label_pair(&clouds[i], &poses[i], &images[j], &poses[j], (i, j), &cfg.label))
        .collect::<Result<_>>()?;
    labels.sort_by_key(|l| (l.query_id, l.ref_id));
    Ok(ToyData { scene, transients, poses, place_of, clouds, images, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::project;

    #[test]
    fn ground_hit_distance() {
        let scene = Scene::new(vec![Primitive { shape: Shape::Ground { z: 0.0 }, probs: class_distribution(0), remission: 0.5 }]);
        let down = Vector3::new(1.0, 0.0, -1.0).normalize();
        let (t, _) = scene.raycast(&Vector3::new(0.0, 0.0, 2.0), &down).unwrap();
        assert!((t - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!(scene.raycast(&Vector3::new(0.0, 0.0, 2.0), &Vector3::z()).is_none());
    }

    #[test]
    fn box_and_cylinder_hits() {
        let o = Vector3::zeros();
        let bx = Shape::Cuboid { center: Vector3::new(5.0, 0.0, 0.0), half: Vector3::new(1.0, 1.0, 1.0), yaw: 0.0 };
        assert!((intersect(&bx, &o, &Vector3::x()).unwrap() - 4.0).abs() < 1e-12);
        let rotated = Shape::Cuboid { center: Vector3::new(5.0, 0.0, 0.0), half: Vector3::new(1.0, 1.0, 1.0), yaw: std::f64::consts::FRAC_PI_4 };
        assert!((intersect(&rotated, &o, &Vector3::x()).unwrap() - (5.0 - 2f64.sqrt())).abs() < 1e-12);
        let cyl = Shape::Cylinder { x: 0.0, y: 10.0, radius: 2.0, z_min: -1.0, z_max: 1.0 };
        assert!((intersect(&cyl, &o, &Vector3::y()).unwrap() - 8.0).abs() < 1e-12);
        assert!(intersect(&cyl, &o, &-Vector3::y()).is_none());
    }

    #[test]
    fn scan_points_project_back_to_their_pixels() {
        let cfg = ProjectionConfig { width: 360, height: 16, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = Scene::random_structured(&mut rng, 30.0, 20, &[Vector3::zeros()], 3.0);
        let cloud = scene.scan(&Pose::from_translation(Vector3::new(0.0, 0.0, SENSOR_HEIGHT)), &cfg, None);
        let img = project(&cloud, &cfg);
        assert_eq!(img.valid_count(), cloud.len());
    }

    #[test]
    fn whole_column_yaw_rolls_the_image() {
        let cfg = ProjectionConfig { width: 360, height: 16, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = Scene::random_structured(&mut rng, 30.0, 25, &[Vector3::zeros()], 3.0);
        let t = Vector3::new(0.0, 0.0, SENSOR_HEIGHT);
        let a = project(&scene.scan(&Pose::from_yaw(0.0, t), &cfg, None), &cfg);
        let b = project(&scene.scan(&Pose::from_yaw(14f64.to_radians(), t), &cfg, None), &cfg);
        let rolled = a.roll_columns(14);
        assert_eq!(rolled.valid, b.valid);
        for i in 0..rolled.range.len() {
            assert!((rolled.range[i] - b.range[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn loop_trajectory_revisits() {
        let poses = loop_trajectory(40, 20.0, 1.0);
        assert_eq!(poses.len(), 40);
        let d = (poses[0].translation() - poses[20].translation()).norm();
        assert!((d - 1.0).abs() < 1e-9);
    }
}
