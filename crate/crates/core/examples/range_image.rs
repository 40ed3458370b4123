//! Projects a synthetic scan to a 64 × 900 range image, estimates normals,
//! compresses the class distributions with PCA and round-trips the result
//! through the `.tnsr` format.
//!
//!     cargo run --release --example range_image -- /tmp/scan.tnsr

use nalgebra::Vector3;
use overlap_loop::pose::Pose;
use overlap_loop::projection::{fit_pca, preprocess, ProjectionConfig, ScanImage};
use overlap_loop::synthetic::{Scene, SENSOR_HEIGHT};
use overlap_loop::tensor_blob::TensorBlob;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> overlap_loop::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "scan.tnsr".into());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scene = Scene::random_structured(&mut rng, 40.0, 60, &[Vector3::zeros()], 4.0);
    let cfg = ProjectionConfig::default();
    let cloud = scene.scan(&Pose::from_translation(Vector3::new(0.0, 0.0, SENSOR_HEIGHT)), &cfg, None);

    let pca = fit_pca(cloud.semantics.as_deref().unwrap_or(&[]))?;
    let img = preprocess(&cloud, &cfg, Some(&pca));
    let with_normal = (0..img.valid.len()).filter(|&i| img.has_normal(i)).count();
    println!("{} points -> {}×{} image, {} valid pixels, {} with normals", cloud.len(), img.height(), img.width(), img.valid_count(), with_normal);
    println!("semantic PCA keeps {:.1}% of the variance", 100.0 * pca.explained_variance_ratio());

    let blob = img.to_blob();
    blob.save(&out)?;
    let back = ScanImage::from_blob(&TensorBlob::load(&out)?, cfg)?;
    let max_err = img.range.iter().zip(&back.range).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("wrote {out}: shape {:?}, channels {:?}, max range error after f32 storage {max_err:.2e} m", blob.shape, blob.channels);
    Ok(())
}
