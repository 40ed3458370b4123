//! Writes a small synthetic sequence in the KITTI odometry layout (binary
//! scans, class probabilities, calibration, poses) and reads it back.
//!
//!     cargo run --release --example kitti_io -- /tmp/kitti

use overlap_loop::dataset::{load_poses, load_scan, load_semantics, SequencePaths};
use overlap_loop::synthetic::{loop_trajectory, Scene};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> overlap_loop::Result<()> {
    let root = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "kitti_toy".into()));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let poses = loop_trajectory(12, 20.0, 0.0);
    let keep: Vec<_> = poses.iter().map(|p| p.translation()).collect();
    let scene = Scene::random_structured(&mut rng, 40.0, 40, &keep, 3.0);
    overlap_loop::synthetic::write_kitti_sequence(&root, "00", &scene, &poses, &Default::default())?;

    let paths = SequencePaths::new(&root, "00");
    let loaded = load_poses(paths.pose_file(), paths.calib_file())?;
    let drift = poses.iter().zip(&loaded).map(|(a, b)| (a.matrix() - b.matrix()).amax()).fold(0.0, f64::max);
    println!("{} poses read back, largest entry difference {drift:.1e}", loaded.len());
    for (i, file) in paths.scan_files()?.iter().enumerate().take(3) {
        let cloud = load_scan(file)?;
        let probs = load_semantics(paths.probs_file(i), cloud.len())?;
        let mean_max: f32 = probs.iter().map(|p| p.iter().cloned().fold(0.0, f32::max)).sum::<f32>() / probs.len().max(1) as f32;
        println!("{}: {} points, mean top class probability {mean_max:.2}", file.display(), cloud.len());
    }
    Ok(())
}
