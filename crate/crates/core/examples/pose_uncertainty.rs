//! Chains noisy odometry steps around a square and watches the covariance
//! grow; then measures Mahalanobis distances to earlier poses.

use nalgebra::Vector3;
use overlap_loop::pose::Pose;
use overlap_loop::uncertainty::{mahalanobis, se3_exp, se3_log, Cov6, PoseWithCov, Tangent};

fn main() -> overlap_loop::Result<()> {
    let mut step_cov = Cov6::zeros();
    for i in 0..6 {
        step_cov[(i, i)] = if i < 3 { 0.05f64.powi(2) } else { 0.01f64.powi(2) };
    }
    let forward = PoseWithCov::new(Pose::from_translation(Vector3::new(2.0, 0.0, 0.0)), step_cov)?;
    let turn = PoseWithCov::new(Pose::from_yaw(std::f64::consts::FRAC_PI_2, Vector3::new(2.0, 0.0, 0.0)), step_cov)?;

    let mut chain = vec![PoseWithCov::certain(Pose::identity())];
    for i in 1..=20 {
        let step = if i % 5 == 0 { &turn } else { &forward };
        chain.push(chain.last().unwrap().compose(step));
    }
    for (i, p) in chain.iter().enumerate().step_by(5) {
        let t = p.mean.translation();
        println!("pose {i:2}: ({:6.2}, {:6.2})  trace(Σ) {:.4}", t.x, t.y, p.cov.trace());
    }

    let last = chain.last().unwrap();
    for j in [0, 5, 10, 15] {
        let d = mahalanobis(&last.mean, &chain[j].mean, &last.cov)?;
        let e = (last.mean.translation() - chain[j].mean.translation()).norm();
        println!("to pose {j:2}: euclidean {e:5.2} m, mahalanobis {d:7.2}");
    }

    let xi = Tangent::new(0.3, -0.2, 0.1, 0.05, 0.4, -1.2);
    let back = se3_log(&se3_exp(&xi));
    println!("exp/log round trip error {:.1e}", (back - xi).amax());
    Ok(())
}
