//! Readers and writers for KITTI-odometry style sequences.
//!
//! Scans are `.bin` files of little-endian `f32` quadruples `(x, y, z, remission)`.
//! Poses are text files with 12 numbers per line (row-major 3×4, camera frame),
//! converted to the LiDAR frame at load time using the `Tr:` calibration entry.
//! Semantic probabilities are `.prob` files with 20 little-endian `f32` per point.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::pose::Pose;

/// Number of semantic classes delivered by the segmentation network.
pub const NUM_CLASSES: usize = 20;

const RECORD_BYTES: usize = 16;
const SEMANTIC_SUM_TOL: f32 = 1e-3;
const POSE_ORTHO_TOL: f64 = 1e-3;

pub type ClassProbs = [f32; NUM_CLASSES];

/// A raw LiDAR scan in the sensor frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub remission: Vec<f32>,
    pub semantics: Option<Vec<ClassProbs>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, remission: Vec<f32>) -> Result<Self> {
        let cloud = PointCloud { points, remission, semantics: None };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn with_semantics(mut self, semantics: Vec<ClassProbs>) -> Result<Self> {
        self.semantics = Some(semantics);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.remission.len() {
            return Err(Error::Validation(format!(
                "{} points but {} remission values",
                self.points.len(),
                self.remission.len()
            )));
        }
        if let Some(sem) = &self.semantics {
            if sem.len() != self.points.len() {
                return Err(Error::Validation(format!(
                    "{} points but {} semantic vectors",
                    self.points.len(),
                    sem.len()
                )));
            }
            for (i, p) in sem.iter().enumerate() {
                check_probability_vector(p, 1e-4).map_err(|e| Error::Validation(format!("point {i}: {e}")))?;
            }
        }
        Ok(())
    }

    /// Applies a rigid transform to every point; attributes are carried along.
    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        let r = pose.rotation();
        let t = pose.translation();
        PointCloud {
            points: self.points.iter().map(|p| r * p + t).collect(),
            remission: self.remission.clone(),
            semantics: self.semantics.clone(),
        }
    }
}

fn check_probability_vector(p: &ClassProbs, tol: f32) -> std::result::Result<(), String> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err("negative or non-finite class probability".into());
    }
    let sum: f32 = p.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(format!("class probabilities sum to {sum}"));
    }
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn f32_le_values(bytes: &[u8]) -> impl Iterator<Item = f32> + '_ {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
}

/// Reads a KITTI velodyne `.bin` scan.
pub fn load_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::malformed(
            path,
            format!("size {} is not a multiple of {RECORD_BYTES} bytes", bytes.len()),
        ));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut points = Vec::with_capacity(n);
    let mut remission = Vec::with_capacity(n);
    let values: Vec<f32> = f32_le_values(&bytes).collect();
    for rec in values.chunks_exact(4) {
        points.push(Vector3::new(rec[0] as f64, rec[1] as f64, rec[2] as f64));
        remission.push(rec[3]);
    }
    Ok(PointCloud { points, remission, semantics: None })
}

pub fn save_scan(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    cloud.validate()?;
    let mut bytes = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for (p, r) in cloud.points.iter().zip(&cloud.remission) {
        for v in [p.x as f32, p.y as f32, p.z as f32, *r] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_row_major_3x4(values: &[f64]) -> (Matrix3<f64>, Vector3<f64>) {
    let r = Matrix3::new(
        values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9], values[10],
    );
    let t = Vector3::new(values[3], values[7], values[11]);
    (r, t)
}

fn parse_numbers(path: &Path, lineno: usize, text: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::malformed(path, format!("line {}: `{tok}` is not a number", lineno + 1)))
        })
        .collect()
}

/// Reads the LiDAR→camera extrinsic `Tr` from a KITTI `calib.txt`.
pub fn load_calibration(calib_path: impl AsRef<Path>) -> Result<Matrix4<f64>> {
    let path = calib_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (lineno, line) in text.lines().enumerate() {
        let Some((key, rest)) = line.split_once(':') else { continue };
        if key.trim() != "Tr" {
            continue;
        }
        let values = parse_numbers(path, lineno, rest)?;
        if values.len() != 12 {
            return Err(Error::Calibration(format!(
                "{}: Tr has {} values, expected 12",
                path.display(),
                values.len()
            )));
        }
        let (r, t) = parse_row_major_3x4(&values);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        return Ok(m);
    }
    Err(Error::Calibration(format!("{}: no `Tr:` entry", path.display())))
}

/// Reads camera-frame poses and expresses them in the LiDAR frame:
/// `T_lidar = Tr⁻¹ · T_cam · Tr`.
pub fn load_poses(pose_path: impl AsRef<Path>, calib_path: impl AsRef<Path>) -> Result<Vec<Pose>> {
    let tr = load_calibration(calib_path)?;
    let tr_inv = tr
        .try_inverse()
        .ok_or_else(|| Error::Calibration("Tr is not invertible".into()))?;
    let path = pose_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let values = parse_numbers(path, lineno, line)?;
        if values.len() != 12 {
            return Err(Error::malformed(
                path,
                format!("line {}: {} numbers, expected 12", lineno + 1, values.len()),
            ));
        }
        let (r, t) = parse_row_major_3x4(&values);
        let mut cam = Matrix4::identity();
        cam.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        cam.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let lidar = tr_inv * cam * tr;
        let pose = Pose::from_approx_rt(
            lidar.fixed_view::<3, 3>(0, 0).into_owned(),
            lidar.fixed_view::<3, 1>(0, 3).into_owned(),
            POSE_ORTHO_TOL,
        )
        .map_err(|e| Error::malformed(path, format!("line {}: {e}", lineno + 1)))?;
        poses.push(pose);
    }
    Ok(poses)
}

/// Writes LiDAR-frame poses as camera-frame KITTI lines, inverting `load_poses`.
pub fn save_poses(path: impl AsRef<Path>, poses: &[Pose], tr: &Matrix4<f64>) -> Result<()> {
    let path = path.as_ref();
    let tr_inv = tr
        .try_inverse()
        .ok_or_else(|| Error::Calibration("Tr is not invertible".into()))?;
    let mut out = String::new();
    for p in poses {
        let cam = tr * p.matrix() * tr_inv;
        let vals: Vec<String> = (0..3)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| format!("{:.12e}", cam[(r, c)]))
            .collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn save_calibration(path: impl AsRef<Path>, tr: &Matrix4<f64>) -> Result<()> {
    let path = path.as_ref();
    let vals: Vec<String> = (0..3)
        .flat_map(|r| (0..4).map(move |c| (r, c)))
        .map(|(r, c)| format!("{:.12e}", tr[(r, c)]))
        .collect();
    fs::write(path, format!("Tr: {}\n", vals.join(" "))).map_err(|e| Error::io(path, e))
}

/// Reads per-point class probabilities, renormalizing vectors whose sum is
/// within 10⁻³ of one.
pub fn load_semantics(path: impl AsRef<Path>, point_count: usize) -> Result<Vec<ClassProbs>> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let expected = point_count * NUM_CLASSES * 4;
    if bytes.len() != expected {
        return Err(Error::malformed(
            path,
            format!("{} bytes, expected {expected} for {point_count} points × {NUM_CLASSES} classes", bytes.len()),
        ));
    }
    let values: Vec<f32> = f32_le_values(&bytes).collect();
    let mut out = Vec::with_capacity(point_count);
    for (i, chunk) in values.chunks_exact(NUM_CLASSES).enumerate() {
        let mut p: ClassProbs = chunk.try_into().expect("chunk of NUM_CLASSES");
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(format!("{}: point {i} has a negative probability", path.display())));
        }
        let sum: f32 = p.iter().sum();
        if (sum - 1.0).abs() > SEMANTIC_SUM_TOL {
            return Err(Error::Validation(format!(
                "{}: point {i} probabilities sum to {sum}",
                path.display()
            )));
        }
        if sum != 1.0 {
            p.iter_mut().for_each(|v| *v /= sum);
        }
        out.push(p);
    }
    Ok(out)
}

pub fn save_semantics(path: impl AsRef<Path>, probs: &[ClassProbs]) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(probs.len() * NUM_CLASSES * 4);
    for p in probs {
        for v in p {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// File locations of one sequence in the KITTI odometry directory layout.
#[derive(Debug, Clone)]
pub struct SequencePaths {
    pub root: PathBuf,
    pub sequence: String,
}

impl SequencePaths {
    pub fn new(dataset_root: impl Into<PathBuf>, sequence: impl Into<String>) -> Self {
        SequencePaths { root: dataset_root.into(), sequence: sequence.into() }
    }

    pub fn sequence_dir(&self) -> PathBuf {
        self.root.join("sequences").join(&self.sequence)
    }

    pub fn velodyne_dir(&self) -> PathBuf {
        self.sequence_dir().join("velodyne")
    }

    pub fn probs_dir(&self) -> PathBuf {
        self.sequence_dir().join("probs")
    }

    pub fn calib_file(&self) -> PathBuf {
        self.sequence_dir().join("calib.txt")
    }

    /// `poses/<seq>.txt` (the benchmark layout) or `sequences/<seq>/poses.txt`.
    pub fn pose_file(&self) -> PathBuf {
        let benchmark = self.root.join("poses").join(format!("{}.txt", self.sequence));
        if benchmark.exists() {
            benchmark
        } else {
            self.sequence_dir().join("poses.txt")
        }
    }

    pub fn scan_file(&self, index: usize) -> PathBuf {
        self.velodyne_dir().join(format!("{index:06}.bin"))
    }

    pub fn probs_file(&self, index: usize) -> PathBuf {
        self.probs_dir().join(format!("{index:06}.prob"))
    }

    /// Sorted list of scan files present in the velodyne directory.
    pub fn scan_files(&self) -> Result<Vec<PathBuf>> {
        let dir = self.velodyne_dir();
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        files.sort();
        Ok(files)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::io::Write;

    fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    #[test]
    fn single_record_scan() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let p = write_file(dir.path(), "a.bin", &bytes);
        let cloud = load_scan(&p).unwrap();
        assert_eq!(cloud.points, vec![Vector3::new(1.0, 2.0, 3.0)]);
        assert_eq!(cloud.remission, vec![0.5]);
        assert!(cloud.semantics.is_none());
    }

    #[test]
    fn empty_scan_has_no_points() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "e.bin", &[]);
        assert!(load_scan(&p).unwrap().is_empty());
    }

    #[test]
    fn truncated_scan_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "t.bin", &[0u8; 33]);
        assert!(matches!(load_scan(&p), Err(Error::MalformedFile { .. })));
    }

    #[test]
    fn missing_scan_is_io_error() {
        let err = load_scan("/nonexistent/scan.bin").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert_eq!(err.exit_code(), 2);
    }

    const IDENTITY_3X4: &str = "1 0 0 0 0 1 0 0 0 0 1 0";

    #[test]
    fn identity_pose_and_calib() {
        let dir = tempfile::tempdir().unwrap();
        let poses = write_file(dir.path(), "poses.txt", format!("{IDENTITY_3X4}\n").as_bytes());
        let calib = write_file(dir.path(), "calib.txt", format!("P0: {IDENTITY_3X4}\nTr: {IDENTITY_3X4}\n").as_bytes());
        let loaded = load_poses(&poses, &calib).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_relative_eq!(*loaded[0].matrix(), Matrix4::identity(), epsilon = 1e-15);
    }

    #[test]
    fn camera_translation_with_identity_calib() {
        let dir = tempfile::tempdir().unwrap();
        let poses = write_file(dir.path(), "poses.txt", b"1 0 0 1 0 1 0 0 0 0 1 0\n");
        let calib = write_file(dir.path(), "calib.txt", format!("Tr: {IDENTITY_3X4}\n").as_bytes());
        let loaded = load_poses(&poses, &calib).unwrap();
        assert_relative_eq!(loaded[0].translation(), Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn short_pose_line_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let poses = write_file(dir.path(), "poses.txt", b"1 0 0 0 0 1 0 0 0 0 1\n");
        let calib = write_file(dir.path(), "calib.txt", format!("Tr: {IDENTITY_3X4}\n").as_bytes());
        assert!(matches!(load_poses(&poses, &calib), Err(Error::MalformedFile { .. })));
    }

    #[test]
    fn missing_tr_is_calibration_error() {
        let dir = tempfile::tempdir().unwrap();
        let poses = write_file(dir.path(), "poses.txt", format!("{IDENTITY_3X4}\n").as_bytes());
        let calib = write_file(dir.path(), "calib.txt", format!("P0: {IDENTITY_3X4}\n").as_bytes());
        assert!(matches!(load_poses(&poses, &calib), Err(Error::Calibration(_))));
    }

    // Values in the benchmark's printed precision (seven significant digits).
    const KITTI_STYLE_POSES: &str = "\
1.000000e+00 9.043680e-12 2.326809e-11 5.551115e-17 9.043683e-12 1.000000e+00 2.392370e-10 3.330669e-16 2.326810e-11 2.392370e-10 9.999999e-01 -4.440892e-16
9.999978e-01 5.272628e-04 -2.066935e-03 -4.690294e-02 -5.296506e-04 9.999992e-01 -1.154865e-03 -2.839928e-02 2.066324e-03 1.155958e-03 9.999971e-01 8.586941e-01
";
    const KITTI_STYLE_CALIB: &str = "\
P0: 7.188560e+02 0.000000e+00 6.071928e+02 0.000000e+00 0.000000e+00 7.188560e+02 1.852157e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00
Tr: 4.276802385584e-04 -9.999672484946e-01 -8.084491683471e-03 -1.198459927713e-02 -7.210626507497e-03 8.081198471645e-03 -9.999413164504e-01 -5.403984729748e-02 9.999738645903e-01 4.859485810390e-04 -7.206933692422e-03 -2.921968648686e-01
";

    #[test]
    fn benchmark_precision_poses_are_orthonormal() {
        let dir = tempfile::tempdir().unwrap();
        let poses = write_file(dir.path(), "00.txt", KITTI_STYLE_POSES.as_bytes());
        let calib = write_file(dir.path(), "calib.txt", KITTI_STYLE_CALIB.as_bytes());
        let loaded = load_poses(&poses, &calib).unwrap();
        assert_eq!(loaded.len(), 2);
        for p in &loaded {
            let r = p.rotation();
            assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-6);
            assert!((r.determinant() - 1.0).abs() < 1e-6);
            assert_eq!(p.matrix().row(3).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 0.0, 1.0]);
        }
        // the camera moves along its +z (forward), which is LiDAR +x
        let t = loaded[1].translation();
        assert!(t.x > 0.8 && t.x < 0.9, "{t:?}");
    }

    #[test]
    fn poses_round_trip_through_camera_frame() {
        let dir = tempfile::tempdir().unwrap();
        let calib = write_file(dir.path(), "calib.txt", KITTI_STYLE_CALIB.as_bytes());
        let tr = load_calibration(&calib).unwrap();
        let poses = vec![Pose::identity(), Pose::from_yaw(0.4, Vector3::new(3.0, -1.0, 0.2))];
        let pose_file = dir.path().join("poses.txt");
        save_poses(&pose_file, &poses, &tr).unwrap();
        let loaded = load_poses(&pose_file, &calib).unwrap();
        for (a, b) in poses.iter().zip(&loaded) {
            assert_relative_eq!(*a.matrix(), *b.matrix(), epsilon = 1e-9);
        }
    }

    fn write_probs(dir: &Path, rows: &[Vec<f32>]) -> PathBuf {
        let mut bytes = Vec::new();
        for r in rows {
            for v in r {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_file(dir, "s.prob", &bytes)
    }

    #[test]
    fn one_hot_and_uniform_semantics_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let mut one_hot = vec![0.0f32; 20];
        one_hot[7] = 1.0;
        let uniform = vec![0.05f32; 20];
        let p = write_probs(dir.path(), &[one_hot.clone(), uniform.clone()]);
        let probs = load_semantics(&p, 2).unwrap();
        assert_eq!(probs[0].to_vec(), one_hot);
        let sum: f32 = probs[1].iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for (a, b) in probs[1].iter().zip(&uniform) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn nineteen_classes_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_probs(dir.path(), &[vec![1.0 / 19.0; 19], vec![1.0 / 19.0; 19]]);
        assert!(matches!(load_semantics(&p, 2), Err(Error::MalformedFile { .. })));
    }

    #[test]
    fn slightly_off_semantics_are_renormalized() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_probs(dir.path(), &[vec![0.05f32 * 1.0005; 20]]);
        let probs = load_semantics(&p, 1).unwrap();
        let sum: f32 = probs[0].iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn badly_normalized_semantics_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_probs(dir.path(), &[vec![0.06f32; 20]]);
        assert!(matches!(load_semantics(&p, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn mismatched_cloud_lengths_fail_validation() {
        let err = PointCloud::new(vec![Vector3::zeros()], vec![]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
