//! Recovers a similarity transform from point correspondences, first with the
//! closed-form fit on clean data, then with the robust fit on data where a
//! third of the correspondences are garbage.
//!
//! Run with `cargo run --example fit_pose_from_correspondences`.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttacope::geometry::{ransac_umeyama, rotation_geodesic_deg, umeyama_fit, RansacConfig};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);

    let truth = ttacope::geometry::SimilarityTransform {
        rotation: Rotation3::from_axis_angle(
            &Unit::new_normalize(Vector3::new(0.3, 1.0, -0.2)),
            0.7,
        )
        .into_inner(),
        translation: Vector3::new(0.15, -0.05, 0.6),
        scale: 1.8,
    };

    // clean correspondences
    let src: Vec<Vector3<f64>> = (0..40)
        .map(|_| Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()) * 0.2)
        .collect();
    let dst: Vec<Vector3<f64>> = src.iter().map(|p| truth.apply(p)).collect();

    let fit = umeyama_fit(&src, &dst).expect("closed-form fit");
    println!("closed-form on 40 clean correspondences:");
    println!("  rotation error  {:.2e} deg", rotation_geodesic_deg(&fit.rotation, &truth.rotation));
    println!("  translation err {:.2e} m", (fit.translation - truth.translation).norm());
    println!("  scale ratio     {:.12}", fit.scale / truth.scale);

    // corrupt a third of them and fit again, plainly and robustly
    let mut bad_dst = dst.clone();
    for d in bad_dst.iter_mut().take(13) {
        *d += Vector3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
    }

    let naive = umeyama_fit(&src, &bad_dst).expect("naive fit");
    let cfg = RansacConfig { rng_seed: 7, ..RansacConfig::default() };
    let (robust, inliers) = ransac_umeyama(&src, &bad_dst, &cfg).expect("robust fit");

    println!("\nsame correspondences with 13 of 40 corrupted:");
    println!(
        "  naive fit   rotation error {:>6.2} deg",
        rotation_geodesic_deg(&naive.rotation, &truth.rotation)
    );
    println!(
        "  robust fit  rotation error {:>6.2e} deg, {} of {} kept as inliers",
        rotation_geodesic_deg(&robust.rotation, &truth.rotation),
        inliers.iter().filter(|&&b| b).count(),
        inliers.len()
    );
}
