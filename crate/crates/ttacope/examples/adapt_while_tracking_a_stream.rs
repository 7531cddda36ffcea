//! Pretrains on the clean source stream, then tracks the shifted target
//! stream twice: once with the model frozen and once adapting online. Prints
//! the rotation error quarter by quarter so the adaptation is visible as it
//! happens.
//!
//! Run with `cargo run --example adapt_while_tracking_a_stream`.

use ttacope::adaptation::{pretrain, run_method, Method};
use ttacope::experiment::ExperimentConfig;
use ttacope::metrics::pose_error;
use ttacope::predictor::ModelParams;
use ttacope::synth::{default_categories, make_stream, Symmetry};

fn main() {
    let cfg = ExperimentConfig::default();
    let (src_cfg, tgt_cfg) = cfg.stream_configs();
    let source = make_stream(&src_cfg, cfg.streams.source_frames, 0).expect("source stream");
    let target = make_stream(&tgt_cfg, cfg.streams.target_frames, 1).expect("target stream");

    let mut model = ModelParams::init(&cfg.model.hidden, cfg.streams.bins, cfg.model.seed);
    println!("pretraining on {} clean frames...", source.len());
    pretrain(&mut model, &source, &cfg.pretrain).expect("pretraining");

    let clouds: Vec<_> = target.iter().map(|r| r.cloud.clone()).collect();
    let cats = default_categories();
    let rot_errors = |run: &ttacope::adaptation::MethodRun| -> Vec<f64> {
        run.frames
            .iter()
            .map(|f| {
                let rec = &target[f.frame];
                let sym = cats
                    .iter()
                    .find(|c| c.name == rec.category)
                    .map(|c| c.symmetry)
                    .unwrap_or(Symmetry::None);
                pose_error(&f.pose, rec.gt_pose.as_ref().unwrap(), sym).rot_deg
            })
            .collect()
    };

    println!("tracking {} shifted frames...\n", target.len());
    let frozen = run_method(Method::LowerBound, &model, &clouds, &cfg.tta).expect("frozen run");
    let adapted = run_method(Method::TtaCope, &model, &clouds, &cfg.tta).expect("adapted run");

    let fe = rot_errors(&frozen);
    let ae = rot_errors(&adapted);
    let quarter = fe.len() / 4;
    println!("mean rotation error by stream quarter:");
    println!("            q1      q2      q3      q4");
    for (name, errs) in [("frozen", &fe), ("adapting", &ae)] {
        print!("{name:>9}");
        for q in 0..4 {
            let chunk = &errs[q * quarter..(q + 1) * quarter];
            print!("  {:5.2}", chunk.iter().sum::<f64>() / chunk.len() as f64);
        }
        println!();
    }

    println!(
        "\nadapting run: {} optimizer steps, {} skipped, {:.1}s wall",
        adapted.summary.updates, adapted.summary.skipped_updates, adapted.summary.wall_seconds
    );
    let last = adapted.frames.last().expect("frames");
    println!(
        "last frame: winner {:?}, inliers student {:?} teacher {:?}",
        last.winner, last.inliers_student, last.inliers_teacher
    );
}
