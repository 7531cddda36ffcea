//! Trains the per-point coordinate predictor on a clean source stream and
//! reports how the label cross-entropy falls, then checks the trained model's
//! pose accuracy on held-out clean frames.
//!
//! Run with `cargo run --example pretrain_on_clean_frames`.

use nalgebra::Vector3;
use ttacope::adaptation::{pretrain, PretrainConfig};
use ttacope::experiment::ExperimentConfig;
use ttacope::filtering::{point_filter, FilterResult};
use ttacope::metrics::{summarize, FrameEval};
use ttacope::nocs::{decode_bins, NocsMap};
use ttacope::predictor::{point_features, ModelParams};
use ttacope::synth::make_stream;

// metric box extents implied by the predicted coordinates of the inliers
fn estimated_size(map: &NocsMap, fr: &FilterResult) -> Vector3<f64> {
    let decoded = decode_bins(map);
    let mut lo = Vector3::from_element(f64::INFINITY);
    let mut hi = Vector3::from_element(f64::NEG_INFINITY);
    for (i, p) in decoded.iter().enumerate() {
        if fr.inlier_count > 0 && !fr.inlier_mask[i] {
            continue;
        }
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    fr.pose.scale * (hi - lo)
}

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.streams.source_frames = 96;
    let (src_cfg, _) = cfg.stream_configs();
    let train = make_stream(&src_cfg, cfg.streams.source_frames, 0).expect("training stream");
    let mut held_cfg = src_cfg.clone();
    held_cfg.seed = src_cfg.seed.wrapping_add(999);
    let held_out = make_stream(&held_cfg, 48, 0).expect("held-out stream");

    let mut model = ModelParams::init(&cfg.model.hidden, cfg.streams.bins, cfg.model.seed);
    let pc = PretrainConfig { epochs: 30, ..cfg.pretrain.clone() };
    println!(
        "pretraining on {} frames, {} epochs, lr {}",
        train.len(),
        pc.epochs,
        pc.learning_rate
    );

    let report = pretrain(&mut model, &train, &pc).expect("pretraining");
    let per_epoch = report.step_losses.len() / pc.epochs;
    for e in (0..pc.epochs).step_by(5) {
        let chunk = &report.step_losses[e * per_epoch..(e + 1) * per_epoch];
        let mean: f64 = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("  epoch {e:>2}: mean step loss {mean:.4}");
    }
    println!("final label cross-entropy on the training stream: {:.4}", report.final_ce);

    // pose accuracy on frames the model never saw
    let cats = ttacope::synth::default_categories();
    let mut evals = Vec::new();
    for (i, rec) in held_out.iter().enumerate() {
        let map = ttacope::predictor::forward(&model, &point_features(&rec.cloud)).expect("forward");
        let ransac = cfg.tta.ransac_for_frame(i as u64 + 1);
        let Ok(fr) = point_filter(&rec.cloud, &map, cfg.tta.rho, &ransac) else { continue };
        let sym = cats
            .iter()
            .find(|c| c.name == rec.category)
            .map(|c| c.symmetry)
            .unwrap_or(ttacope::synth::Symmetry::None);
        evals.push(FrameEval {
            est_size: estimated_size(&map, &fr),
            est_pose: fr.pose.clone(),
            gt_pose: rec.gt_pose.clone().unwrap(),
            gt_size: rec.gt_size.unwrap(),
            category: rec.category.clone(),
            symmetry: sym,
        });
    }
    let summary = summarize(&evals).expect("summary");
    println!(
        "\nheld-out clean frames: mean rotation {:.2} deg, 10deg-5cm accuracy {:.3}",
        summary.overall.mean_rot_deg, summary.overall.deg10cm5
    );
}
