//! Filters a frame's points by agreement with the fitted pose, then lets two
//! models compete for the frame: whichever explains more points wins.
//!
//! Run with `cargo run --example filter_points_and_ensemble_poses`.

use ttacope::adaptation::{pretrain, PretrainConfig};
use ttacope::experiment::ExperimentConfig;
use ttacope::filtering::{point_filter, pose_ensemble_inlier_max, ModelTag};
use ttacope::geometry::rotation_geodesic_deg;
use ttacope::predictor::{forward, point_features, ModelParams};
use ttacope::synth::make_stream;

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.streams.source_frames = 96;
    let (src_cfg, _) = cfg.stream_configs();
    let source = make_stream(&src_cfg, cfg.streams.source_frames, 0).expect("source stream");
    let mut held_cfg = src_cfg.clone();
    held_cfg.seed = src_cfg.seed.wrapping_add(999);
    let held_out = make_stream(&held_cfg, 12, 0).expect("held-out stream");

    // two members: the same recipe stopped early and trained to the end
    let mut sharp = ModelParams::init(&cfg.model.hidden, cfg.streams.bins, cfg.model.seed);
    pretrain(&mut sharp, &source, &PretrainConfig { epochs: 30, ..cfg.pretrain.clone() })
        .expect("pretrain");
    let mut blunt = ModelParams::init(&cfg.model.hidden, cfg.streams.bins, cfg.model.seed);
    pretrain(&mut blunt, &source, &PretrainConfig { epochs: 4, ..cfg.pretrain.clone() })
        .expect("pretrain");

    println!("frame  inliers(a/b)  winner   rot err a    rot err b");
    for (i, rec) in held_out.iter().enumerate() {
        let feats = point_features(&rec.cloud);
        let ransac = cfg.tta.ransac_for_frame(i as u64 + 1);
        let map_a = forward(&sharp, &feats).expect("forward");
        let map_b = forward(&blunt, &feats).expect("forward");
        let (Ok(fa), Ok(fb)) = (
            point_filter(&rec.cloud, &map_a, cfg.tta.rho, &ransac),
            point_filter(&rec.cloud, &map_b, cfg.tta.rho, &ransac),
        ) else {
            println!("{i:>5}  degenerate frame, skipped");
            continue;
        };
        let (_, tag) = pose_ensemble_inlier_max(&fa, &fb);
        let gt = rec.gt_pose.as_ref().expect("synthetic gt");
        println!(
            "{i:>5}  {:>4} / {:<4}  {:<7}  {:>7.2} deg  {:>7.2} deg",
            fa.inlier_count,
            fb.inlier_count,
            match tag {
                ModelTag::Student => "first",
                ModelTag::Teacher => "second",
            },
            rotation_geodesic_deg(&fa.pose.rotation, &gt.rotation),
            rotation_geodesic_deg(&fb.pose.rotation, &gt.rotation),
        );
    }
    println!("\nties go to the second slot, which the adaptation loop reserves for the teacher");
}
