//! Scores pose estimates against ground truth: geodesic rotation error,
//! translation error, oriented-box overlap, and the thresholded accuracy
//! fractions, including how axial symmetry forgives spin about the free axis.
//!
//! Run with `cargo run --example score_pose_accuracy`.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use ttacope::geometry::SimilarityTransform;
use ttacope::metrics::{evaluate_frame, pose_error, summarize, FrameEval};
use ttacope::synth::Symmetry;

fn spin(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
}

fn main() {
    let gt = SimilarityTransform {
        rotation: spin(Vector3::new(0.2, 1.0, 0.1), 0.4),
        translation: Vector3::new(0.1, 0.0, 0.5),
        scale: 0.25,
    };
    let size = Vector3::new(0.15, 0.25, 0.15);

    // a slightly wrong estimate of the same frame
    let est = SimilarityTransform {
        rotation: spin(Vector3::new(0.2, 1.0, 0.1), 0.4) * spin(Vector3::x(), 0.05),
        translation: gt.translation + Vector3::new(0.01, -0.005, 0.0),
        scale: 0.25,
    };
    let err = pose_error(&est, &gt, Symmetry::None);
    println!(
        "perturbed estimate: rotation {:.2} deg, translation {:.1} mm",
        err.rot_deg,
        err.trans_m * 1e3
    );

    // spinning a can about its free axis costs nothing, tipping it does
    let canonical = gt.clone();
    let spun = SimilarityTransform {
        rotation: gt.rotation * spin(Vector3::y(), 1.2),
        ..gt.clone()
    };
    let tipped = SimilarityTransform {
        rotation: gt.rotation * spin(Vector3::x(), 0.3),
        ..gt.clone()
    };
    for (name, est) in [("spun 69 deg", &spun), ("tipped 17 deg", &tipped)] {
        let strict = pose_error(est, &canonical, Symmetry::None).rot_deg;
        let axial = pose_error(est, &canonical, Symmetry::Axial(1)).rot_deg;
        println!("{name}: {strict:5.1} deg strict, {axial:5.1} deg with axial symmetry");
    }

    // frame scores fold in the box overlap
    let scores = evaluate_frame(&FrameEval {
        est_pose: est.clone(),
        est_size: size * 1.05,
        gt_pose: gt.clone(),
        gt_size: size,
        category: "can".into(),
        symmetry: Symmetry::Axial(1),
    });
    println!(
        "\nsingle frame: rot {:.2} deg, trans {:.1} mm, box IoU {:.3}",
        scores.rot_deg,
        scores.trans_m * 1e3,
        scores.iou
    );

    // a small batch summarized the way the reports do it
    let mut evals = Vec::new();
    for k in 0..20 {
        let wobble = 0.01 + 0.02 * k as f64;
        evals.push(FrameEval {
            est_pose: SimilarityTransform {
                rotation: gt.rotation * spin(Vector3::new(1.0, 0.3, 0.0), wobble),
                translation: gt.translation + Vector3::new(0.002, 0.0, 0.0) * k as f64,
                scale: gt.scale,
            },
            est_size: size,
            gt_pose: gt.clone(),
            gt_size: size,
            category: if k % 2 == 0 { "box" } else { "can" }.into(),
            symmetry: if k % 2 == 0 { Symmetry::None } else { Symmetry::Axial(1) },
        });
    }
    let summary = summarize(&evals).expect("summary");
    println!(
        "20 drifting frames: 5deg-5cm {:.2}, 10deg-5cm {:.2}, mean rot {:.2} deg",
        summary.overall.deg5cm5, summary.overall.deg10cm5, summary.overall.mean_rot_deg
    );
    for (cat, s) in &summary.per_category {
        println!("  {cat}: {} frames, mean rot {:.2} deg", s.frames, s.mean_rot_deg);
    }
}
