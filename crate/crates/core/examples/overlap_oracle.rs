//! Ground-truth overlap along a straight drive, compared with the pose-free
//! exhaustive rotation sweep.

use nalgebra::Vector3;
use overlap_loop::overlap::{exhaustive_overlap, label_pair, LabelConfig};
use overlap_loop::pose::Pose;
use overlap_loop::projection::project;
use overlap_loop::synthetic::{compact_projection, Scene, SENSOR_HEIGHT};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> overlap_loop::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = compact_projection();
    let path: Vec<Vector3<f64>> = (0..8).map(|i| Vector3::new(6.0 * i as f64, 0.0, SENSOR_HEIGHT)).collect();
    let scene = Scene::random_structured(&mut rng, 60.0, 120, &path, 3.0);
    let poses: Vec<Pose> = path.iter().enumerate().map(|(i, p)| Pose::from_yaw((25.0 * i as f64).to_radians(), *p)).collect();
    let clouds: Vec<_> = poses.iter().map(|p| scene.scan(p, &cfg, None)).collect();
    let query = project(&clouds[0], &cfg);

    println!("distance  overlap  yaw_gt  exhaustive(max, angle)");
    for j in 0..poses.len() {
        let l = label_pair(&clouds[j], &poses[j], &query, &poses[0], (j, 0), &LabelConfig::default())?;
        let (best, angle) = exhaustive_overlap(&clouds[j], &clouds[0], 5, &cfg, 1.0)?;
        let yaw = l.yaw_gt.map_or("-".to_string(), |y| y.to_string());
        println!("{:6.1} m  {:7.3}  {yaw:>6}  ({best:.3}, {angle}°)", 6.0 * j as f64, l.overlap);
    }
    Ok(())
}
