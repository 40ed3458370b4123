//! Point-to-plane ICP between two synthetic scans 60° and 0.5 m apart,
//! seeded once with the identity and once with the true yaw.

use nalgebra::Vector3;
use overlap_loop::pose::Pose;
use overlap_loop::projection::preprocess;
use overlap_loop::registration::{icp_traced, IcpConfig};
use overlap_loop::synthetic::{Scene, SENSOR_HEIGHT};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> overlap_loop::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = overlap_loop::projection::ProjectionConfig::default();
    let scene = Scene::random_structured(&mut rng, 40.0, 60, &[Vector3::zeros()], 4.0);
    let mut at = |p: Pose| preprocess(&scene.scan(&p, &cfg, Some((0.01, &mut rng as &mut dyn rand::RngCore))), &cfg, None);
    let pose_a = Pose::from_translation(Vector3::new(0.0, 0.0, SENSOR_HEIGHT));
    let pose_b = Pose::from_yaw(60f64.to_radians(), Vector3::new(0.4, 0.3, SENSOR_HEIGHT));
    let (target, source) = (at(pose_a), at(pose_b));
    // source frame -> target frame
    let truth = pose_a.inverse() * pose_b;

    for (name, init) in [("identity", Pose::identity()), ("yaw prior", Pose::from_yaw(truth.yaw(), Vector3::zeros()))] {
        match icp_traced(&source, &target, &init, &IcpConfig::default()) {
            Ok((r, trace)) => {
                let dt = (r.transform.translation() - truth.translation()).norm();
                let dyaw = (r.transform.yaw() - truth.yaw()).to_degrees();
                println!("{name}: {} iterations, {} correspondences, translation error {dt:.3} m, yaw error {dyaw:.2}°", r.iterations, r.correspondences);
                if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
                    println!("  robust error {:.2} -> {:.2}", first.error_before, last.error_after);
                }
                let sd: Vec<String> = (0..6).map(|i| format!("{}={:.1e}", r.tangent_order[i], r.covariance[i][i].sqrt())).collect();
                println!("  1σ: {}", sd.join(" "));
            }
            Err(e) => println!("{name}: failed ({e})"),
        }
    }
    Ok(())
}
