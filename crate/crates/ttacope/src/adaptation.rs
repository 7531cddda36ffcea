//! Training and online test-time adaptation of the predictor.
//!
//! Pretraining fits the student on labeled source frames with an
//! augmentation-consistency term. At test time the model sees an unlabeled
//! target stream one frame at a time and may only learn from its own
//! predictions: a slow-moving teacher (exponential moving average of the
//! student) provides pseudo-labels, geometric filtering decides which points
//! are trustworthy, and the student takes one optimizer step per update
//! interval before the adapted pair predicts the frame's pose.
//!
//! Several reference methods share this machinery: plain inference
//! (`lower-bound`), entropy minimization on normalization parameters only
//! (`tent`), and pseudo-labeling with or without filtering (`pl`,
//! `pl-filtered`). The full method adds the depth self-training loss and
//! inlier-based pose ensembling.

use nalgebra::Vector3;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::error::Error;
use crate::filtering::{
    input_ensemble, point_filter, pose_ensemble_inlier_max, output_ensemble_softmax_max,
    EnsembleMode, FilterResult, ModelTag,
};
use crate::geometry::{ObservedCloud, RansacConfig, SimilarityTransform};
use crate::nocs::{argmax_bins, cross_entropy, decode_bins, encode_bins, entropy_with_grad, NocsMap, NocsTarget};
use crate::predictor::{
    adam_step, adam_step_masked, backward, ema_update, forward, point_features, tent_parameter_mask,
    ModelParams, OptimizerState, ParameterMask,
};
use crate::seeds;
use crate::synth::FrameRecord;

/// Scalar weights for the loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Supervised cross-entropy (pretraining).
    pub lambda_ce: f64,
    /// Augmentation-consistency term (pretraining).
    pub lambda_c: f64,
    /// Depth self-training term (adaptation).
    pub lambda_d: f64,
    /// Pseudo-label term (adaptation).
    pub lambda_pl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_ce: 1.0, lambda_c: 1e-6, lambda_d: 1.0, lambda_pl: 1.0 }
    }
}

/// Adaptation method selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Source model, no adaptation.
    LowerBound,
    /// Entropy minimization on normalization parameters.
    Tent,
    /// Teacher pseudo-labels on all points.
    Pl,
    /// Teacher pseudo-labels restricted to filter inliers.
    PlFiltered,
    /// Filtered pseudo-labels, depth self-training and pose ensembling.
    TtaCope,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::LowerBound, Method::Tent, Method::Pl, Method::PlFiltered, Method::TtaCope];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::LowerBound => "lower-bound",
            Method::Tent => "tent",
            Method::Pl => "pl",
            Method::PlFiltered => "pl-filtered",
            Method::TtaCope => "tta-cope",
        }
    }

    /// True when the method mutates model parameters during the run.
    pub fn adapts(self) -> bool {
        !matches!(self, Method::LowerBound)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "lower-bound" => Ok(Method::LowerBound),
            "tent" => Ok(Method::Tent),
            "pl" => Ok(Method::Pl),
            "pl-filtered" => Ok(Method::PlFiltered),
            "tta-cope" => Ok(Method::TtaCope),
            other => Err(Error::UnknownMethod(other.to_string())),
        }
    }
}

/// Knobs for one adaptation run.
#[derive(Clone, Debug, PartialEq)]
pub struct TtaConfig {
    pub method: Method,
    /// Teacher EMA momentum.
    pub gamma: f64,
    /// Filter inlier threshold in normalized-coordinate units.
    pub rho: f64,
    /// Take an optimizer step every this many frames.
    pub update_interval: u64,
    pub learning_rate: f64,
    pub rng_seed: u64,
    pub weights: LossWeights,
    pub ransac: RansacConfig,
    /// How the student and teacher predictions are fused for the reported
    /// pose. The update path always arbitrates by inlier count.
    pub ensemble: EnsembleMode,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            method: Method::TtaCope,
            gamma: 0.99,
            rho: 0.05,
            update_interval: 1,
            learning_rate: 1e-4,
            rng_seed: 0,
            weights: LossWeights::default(),
            ransac: RansacConfig::default(),
            ensemble: EnsembleMode::InlierMax,
        }
    }
}

impl TtaConfig {
    /// Per-frame robust-fit config; every frame gets its own derived seed so
    /// replaying a stream prefix reproduces the same fits.
    pub fn ransac_for_frame(&self, frame_number: u64) -> RansacConfig {
        RansacConfig {
            rng_seed: seeds::derive(self.rng_seed, 0x7a, frame_number),
            ..self.ransac.clone()
        }
    }
}

/// Supervised loss: cross-entropy against labels plus a consistency term
/// tying an augmented view to the clean prediction's bins. The consistency
/// target is the clean argmax, treated as a constant.
pub struct SupervisedLoss {
    pub total: f64,
    pub cross_entropy: f64,
    pub consistency: f64,
    /// Gradient with respect to the clean map's logits.
    pub grad_map: Vec<f64>,
    /// Gradient with respect to the augmented map's logits.
    pub grad_aug: Vec<f64>,
}

pub fn supervised_loss(
    map: &NocsMap,
    target: &NocsTarget,
    aug_map: &NocsMap,
    weights: &LossWeights,
) -> Result<SupervisedLoss, Error> {
    let (ce, mut grad_map) = cross_entropy(map, target, None)?;
    let pseudo = argmax_bins(map);
    let (cons, mut grad_aug) = cross_entropy(aug_map, &pseudo, None)?;
    for g in grad_map.iter_mut() {
        *g *= weights.lambda_ce;
    }
    for g in grad_aug.iter_mut() {
        *g *= weights.lambda_c;
    }
    Ok(SupervisedLoss {
        total: weights.lambda_ce * ce + weights.lambda_c * cons,
        cross_entropy: ce,
        consistency: cons,
        grad_map,
        grad_aug,
    })
}

/// One entropy-minimization step on a frame: forward, entropy gradient,
/// masked Adam update. Returns the pre-step entropy.
pub fn entropy_loss_step(
    student: &mut ModelParams,
    cloud: &ObservedCloud,
    opt: &mut OptimizerState,
    mask: &ParameterMask,
) -> Result<f64, Error> {
    let feats = point_features(cloud);
    let map = forward(student, &feats)?;
    let (h, upstream) = entropy_with_grad(&map);
    let grads = backward(student, &feats, &upstream)?;
    adam_step_masked(student, &grads, opt, mask);
    Ok(h)
}

/// Cross-entropy of the student against the teacher's argmax bins, optionally
/// restricted to an inlier mask. The teacher is a constant target.
pub fn pseudo_label_loss(
    student_map: &NocsMap,
    teacher_map: &NocsMap,
    mask: Option<&[bool]>,
) -> Result<(f64, Vec<f64>), Error> {
    if student_map.points() != teacher_map.points() || student_map.bins() != teacher_map.bins() {
        return Err(Error::ShapeMismatch(format!(
            "student {}x{} vs teacher {}x{}",
            student_map.points(),
            student_map.bins(),
            teacher_map.points(),
            teacher_map.bins()
        )));
    }
    let target = argmax_bins(teacher_map);
    cross_entropy(student_map, &target, mask)
}

/// Depth self-training loss: the observation, mapped through the fitted pose
/// into coordinate space and re-binned, supervises the student on the filter
/// inliers. The pose is treated as a constant.
pub fn self_training_loss(
    student_map: &NocsMap,
    filter: &FilterResult,
) -> Result<(f64, Vec<f64>), Error> {
    if filter.nocs_space_depth.len() != student_map.points() {
        return Err(Error::ShapeMismatch(format!(
            "filter carries {} points vs map {}",
            filter.nocs_space_depth.len(),
            student_map.points()
        )));
    }
    let target = encode_bins(&filter.nocs_space_depth, student_map.bins());
    cross_entropy(student_map, &target, Some(&filter.inlier_mask))
}

/// Weighted combination of the depth and pseudo-label terms.
pub fn tta_loss(
    loss_depth: f64,
    grad_depth: &[f64],
    loss_pseudo: f64,
    grad_pseudo: &[f64],
    weights: &LossWeights,
) -> (f64, Vec<f64>) {
    debug_assert_eq!(grad_depth.len(), grad_pseudo.len());
    let total = weights.lambda_d * loss_depth + weights.lambda_pl * loss_pseudo;
    let grad = grad_depth
        .iter()
        .zip(grad_pseudo)
        .map(|(d, p)| weights.lambda_d * d + weights.lambda_pl * p)
        .collect();
    (total, grad)
}

/// Pretraining schedule and augmentation knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Gaussian jitter applied to augmented-view points, meters.
    pub jitter_sigma: f64,
    /// Point dropout probability for the augmented view.
    pub dropout_rate: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// `(fraction_of_training, lr_multiplier)` milestones; the last milestone
    /// at or below the current progress wins.
    pub lr_schedule: Vec<(f64, f64)>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-4,
            jitter_sigma: 0.004,
            dropout_rate: 0.1,
            weights: LossWeights::default(),
            seed: 0,
            lr_schedule: vec![(0.2, 0.6), (0.4, 0.3), (0.6, 0.1), (0.8, 0.01)],
        }
    }
}

/// Loss curve from a pretraining run.
pub struct PretrainReport {
    /// Total loss per optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean label cross-entropy over the source stream after training.
    pub final_ce: f64,
}

fn schedule_multiplier(schedule: &[(f64, f64)], progress: f64) -> f64 {
    let mut mult = 1.0;
    for &(frac, m) in schedule {
        if progress >= frac {
            mult = m;
        }
    }
    mult
}

/// Supervised pretraining on labeled source frames, shuffled each epoch,
/// with a jittered/dropped-out augmented view feeding the consistency term.
/// Deterministic in `cfg.seed`.
pub fn pretrain(
    model: &mut ModelParams,
    source: &[FrameRecord],
    cfg: &PretrainConfig,
) -> Result<PretrainReport, Error> {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_distr::Distribution;

    if source.is_empty() {
        return Err(Error::EmptyInput);
    }
    for (i, f) in source.iter().enumerate() {
        if f.gt_nocs.is_none() {
            return Err(Error::MissingGroundTruth("frame target bins"));
        }
        let t = f.gt_nocs.as_ref().unwrap();
        if t.points() != f.cloud.len() || t.bins() != model.bins() {
            return Err(Error::ShapeMismatch(format!(
                "source frame {i}: target {}x{} vs cloud {} and model bins {}",
                t.points(),
                t.bins(),
                f.cloud.len(),
                model.bins()
            )));
        }
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(model, cfg.learning_rate);
    let total_steps = (cfg.epochs * source.len()).max(1);
    let mut step_losses = Vec::with_capacity(cfg.epochs * source.len());
    let mut order: Vec<usize> = (0..source.len()).collect();
    let gauss = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");

    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &fi in &order {
            opt.learning_rate = cfg.learning_rate
                * schedule_multiplier(&cfg.lr_schedule, step as f64 / total_steps as f64);
            let frame = &source[fi];
            let target = frame.gt_nocs.as_ref().unwrap();
            let feats = point_features(&frame.cloud);
            let map = forward(model, &feats)?;
            let (ce, mut grad_map) = cross_entropy(&map, target, None)?;
            for g in grad_map.iter_mut() {
                *g *= cfg.weights.lambda_ce;
            }
            let mut grads = backward(model, &feats, &grad_map)?;

            // Augmented view: jitter every point, then drop a subset. The
            // clean argmax on the survivors is the consistency target.
            let mut kept_rows: Vec<usize> = (0..frame.cloud.len())
                .filter(|_| !(cfg.dropout_rate > 0.0 && rng.random_bool(cfg.dropout_rate)))
                .collect();
            if kept_rows.len() < 4 {
                kept_rows = (0..frame.cloud.len()).collect();
            }
            let aug_points: Vec<Vector3<f64>> = kept_rows
                .iter()
                .map(|&r| {
                    let p = frame.cloud.points()[r];
                    Vector3::new(
                        p.x + cfg.jitter_sigma * gauss.sample(&mut rng),
                        p.y + cfg.jitter_sigma * gauss.sample(&mut rng),
                        p.z + cfg.jitter_sigma * gauss.sample(&mut rng),
                    )
                })
                .collect();
            let aug_cloud = ObservedCloud::new(aug_points)?;
            let aug_feats = point_features(&aug_cloud);
            let aug_map = forward(model, &aug_feats)?;
            let pseudo = argmax_bins(&map).select(&kept_rows);
            let (cons, mut grad_aug) = cross_entropy(&aug_map, &pseudo, None)?;
            for g in grad_aug.iter_mut() {
                *g *= cfg.weights.lambda_c;
            }
            grads.add_assign(&backward(model, &aug_feats, &grad_aug)?);

            adam_step(model, &grads, &mut opt);
            step_losses.push(cfg.weights.lambda_ce * ce + cfg.weights.lambda_c * cons);
            step += 1;
        }
    }

    let mut ce_sum = 0.0;
    for frame in source {
        let map = forward(model, &point_features(&frame.cloud))?;
        ce_sum += cross_entropy(&map, frame.gt_nocs.as_ref().unwrap(), None)?.0;
    }
    Ok(PretrainReport { step_losses, final_ce: ce_sum / source.len() as f64 })
}

/// One model's forward pass plus its geometric fit (when the fit succeeds).
struct ModelView {
    map: NocsMap,
    fr: Option<FilterResult>,
}

fn model_view(
    model: &ModelParams,
    cloud: &ObservedCloud,
    feats: &nalgebra::DMatrix<f64>,
    rho: f64,
    ransac: &RansacConfig,
) -> Result<ModelView, Error> {
    let map = forward(model, feats)?;
    let fr = point_filter(cloud, &map, rho, ransac).ok();
    Ok(ModelView { map, fr })
}

/// Per-axis extent of the decoded coordinates, preferring filter inliers.
/// Scaled by the pose this turns into a metric size estimate.
fn nocs_extent(map: &NocsMap, fr: Option<&FilterResult>) -> Vector3<f64> {
    let decoded = decode_bins(map);
    let use_mask = fr.map_or(false, |f| f.inlier_count > 0);
    let mut lo = Vector3::from_element(f64::INFINITY);
    let mut hi = Vector3::from_element(f64::NEG_INFINITY);
    for (i, p) in decoded.iter().enumerate() {
        if use_mask && !fr.unwrap().inlier_mask[i] {
            continue;
        }
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mut e = hi - lo;
    for a in 0..3 {
        if !e[a].is_finite() || e[a] <= 0.0 {
            e[a] = 1e-6;
        }
    }
    e
}

struct Inference {
    pose: SimilarityTransform,
    est_size: Vector3<f64>,
    winner: Option<ModelTag>,
    inliers_student: Option<usize>,
    inliers_teacher: Option<usize>,
    /// No usable fit anywhere; the pose is a placeholder identity.
    degenerate: bool,
}

fn infer(
    student: &ModelView,
    teacher: &ModelView,
    cloud: &ObservedCloud,
    cfg: &TtaConfig,
    ransac: &RansacConfig,
) -> Result<Inference, Error> {
    let from_tag = |tag: ModelTag| -> Inference {
        let (view, fr) = match tag {
            ModelTag::Student => (student, student.fr.as_ref().unwrap()),
            ModelTag::Teacher => (teacher, teacher.fr.as_ref().unwrap()),
        };
        Inference {
            pose: fr.pose.clone(),
            est_size: fr.pose.scale * nocs_extent(&view.map, Some(fr)),
            winner: Some(tag),
            inliers_student: student.fr.as_ref().map(|s| s.inlier_count),
            inliers_teacher: teacher.fr.as_ref().map(|t| t.inlier_count),
            degenerate: false,
        }
    };
    // Whichever single-model pose is available, by inlier count when both are.
    let fallback = || -> Inference {
        match (&student.fr, &teacher.fr) {
            (Some(sf), Some(tf)) => from_tag(pose_ensemble_inlier_max(sf, tf).1),
            (Some(_), None) => from_tag(ModelTag::Student),
            (None, Some(_)) => from_tag(ModelTag::Teacher),
            (None, None) => Inference {
                pose: SimilarityTransform::identity(),
                est_size: Vector3::from_element(1e-6),
                winner: None,
                inliers_student: None,
                inliers_teacher: None,
                degenerate: true,
            },
        }
    };

    if cfg.ensemble.is_input_level() {
        let fused = input_ensemble(&student.map, &teacher.map, cfg.ensemble)?;
        if let Ok(fr) = point_filter(cloud, &fused, cfg.rho, ransac) {
            return Ok(Inference {
                pose: fr.pose.clone(),
                est_size: fr.pose.scale * nocs_extent(&fused, Some(&fr)),
                winner: None,
                inliers_student: student.fr.as_ref().map(|s| s.inlier_count),
                inliers_teacher: teacher.fr.as_ref().map(|t| t.inlier_count),
                degenerate: false,
            });
        }
        return Ok(fallback());
    }

    match (&student.fr, &teacher.fr) {
        (Some(sf), Some(tf)) => {
            let (_, tag) = match cfg.ensemble {
                EnsembleMode::OutputSoftmaxMax => {
                    output_ensemble_softmax_max(sf, &student.map, tf, &teacher.map)
                }
                _ => pose_ensemble_inlier_max(sf, tf),
            };
            Ok(from_tag(tag))
        }
        _ => Ok(fallback()),
    }
}

/// What one adaptation step produced.
#[derive(Clone, Debug, PartialEq)]
pub struct TtaStepOutcome {
    pub pose: SimilarityTransform,
    /// Metric bounding-box size estimate.
    pub est_size: Vector3<f64>,
    /// Which model's pose was reported; `None` for fused or degenerate.
    pub winner: Option<ModelTag>,
    pub inliers_student: Option<usize>,
    pub inliers_teacher: Option<usize>,
    pub loss_depth: Option<f64>,
    pub loss_pseudo: Option<f64>,
    pub updated: bool,
    /// An update was due but had to be skipped (no usable fit or no inliers).
    pub skipped_update: bool,
}

/// One frame of the full method: predict with both models, filter, pick the
/// pseudo-label pose by inlier count, take a student step on the combined
/// loss, move the teacher, then predict again with the adapted pair for the
/// reported pose. `frame_number` is 1-based; updates happen on multiples of
/// the configured interval.
pub fn tta_step(
    student: &mut ModelParams,
    teacher: &mut ModelParams,
    opt: &mut OptimizerState,
    cloud: &ObservedCloud,
    frame_number: u64,
    cfg: &TtaConfig,
) -> Result<TtaStepOutcome, Error> {
    if cfg.update_interval == 0 {
        return Err(Error::DegenerateInput("update interval must be at least 1"));
    }
    let feats = point_features(cloud);
    let ransac = cfg.ransac_for_frame(frame_number);
    let mut s_view = model_view(student, cloud, &feats, cfg.rho, &ransac)?;
    let mut t_view = model_view(teacher, cloud, &feats, cfg.rho, &ransac)?;

    let due = frame_number % cfg.update_interval == 0;
    let mut updated = false;
    let mut skipped_update = false;
    let mut loss_depth = None;
    let mut loss_pseudo = None;

    if due {
        match (&s_view.fr, &t_view.fr) {
            (Some(sf), Some(tf)) => {
                let (_, tag) = pose_ensemble_inlier_max(sf, tf);
                let winner_fr = match tag {
                    ModelTag::Student => sf,
                    ModelTag::Teacher => tf,
                };
                let depth = self_training_loss(&s_view.map, winner_fr);
                let pseudo =
                    pseudo_label_loss(&s_view.map, &t_view.map, Some(&winner_fr.inlier_mask));
                match (depth, pseudo) {
                    (Ok((ld, gd)), Ok((lp, gp))) => {
                        let (_, upstream) = tta_loss(ld, &gd, lp, &gp, &cfg.weights);
                        let grads = backward(student, &feats, &upstream)?;
                        adam_step(student, &grads, opt);
                        ema_update(teacher, student, cfg.gamma)?;
                        loss_depth = Some(ld);
                        loss_pseudo = Some(lp);
                        updated = true;
                    }
                    _ => {
                        skipped_update = true;
                        log::warn!("frame {frame_number}: empty inlier set, skipping update");
                    }
                }
            }
            _ => {
                skipped_update = true;
                log::warn!("frame {frame_number}: no usable fit, skipping update");
            }
        }
    }

    if updated {
        s_view = model_view(student, cloud, &feats, cfg.rho, &ransac)?;
        t_view = model_view(teacher, cloud, &feats, cfg.rho, &ransac)?;
    }
    let inf = infer(&s_view, &t_view, cloud, cfg, &ransac)?;
    if inf.degenerate {
        log::warn!("frame {frame_number}: degenerate frame, emitting identity pose");
    }
    Ok(TtaStepOutcome {
        pose: inf.pose,
        est_size: inf.est_size,
        winner: inf.winner,
        inliers_student: inf.inliers_student,
        inliers_teacher: inf.inliers_teacher,
        loss_depth,
        loss_pseudo,
        updated,
        skipped_update,
    })
}

/// Per-frame record of a method run.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput {
    pub frame: usize,
    pub pose: SimilarityTransform,
    pub est_size: Vector3<f64>,
    pub winner: Option<ModelTag>,
    pub inliers_student: Option<usize>,
    pub inliers_teacher: Option<usize>,
    pub loss_depth: Option<f64>,
    pub loss_pseudo: Option<f64>,
    pub loss_entropy: Option<f64>,
    pub updated: bool,
    pub skipped_update: bool,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub method: Method,
    pub frames: usize,
    pub updates: usize,
    pub skipped_updates: usize,
    pub wall_seconds: f64,
}

pub struct MethodRun {
    pub frames: Vec<FrameOutput>,
    pub summary: RunSummary,
}

fn plain_inference(
    model: &ModelParams,
    cloud: &ObservedCloud,
    cfg: &TtaConfig,
    ransac: &RansacConfig,
) -> Result<(SimilarityTransform, Vector3<f64>, Option<usize>), Error> {
    let feats = point_features(cloud);
    let map = forward(model, &feats)?;
    match point_filter(cloud, &map, cfg.rho, ransac) {
        Ok(fr) => {
            let size = fr.pose.scale * nocs_extent(&map, Some(&fr));
            Ok((fr.pose.clone(), size, Some(fr.inlier_count)))
        }
        Err(_) => Ok((SimilarityTransform::identity(), Vector3::from_element(1e-6), None)),
    }
}

/// Runs a method over an unlabeled stream of observations, one frame at a
/// time in order. The stream carries no ground truth by construction; all a
/// method ever sees are the clouds and its own predictions.
pub fn run_method(
    method: Method,
    pretrained: &ModelParams,
    clouds: &[ObservedCloud],
    cfg: &TtaConfig,
) -> Result<MethodRun, Error> {
    if cfg.update_interval == 0 {
        return Err(Error::DegenerateInput("update interval must be at least 1"));
    }
    let start = Instant::now();
    let mut frames = Vec::with_capacity(clouds.len());
    let mut updates = 0usize;
    let mut skipped = 0usize;

    match method {
        Method::LowerBound => {
            for (i, cloud) in clouds.iter().enumerate() {
                let ransac = cfg.ransac_for_frame(i as u64 + 1);
                let (pose, est_size, inl) = plain_inference(pretrained, cloud, cfg, &ransac)?;
                frames.push(FrameOutput {
                    frame: i,
                    pose,
                    est_size,
                    winner: None,
                    inliers_student: inl,
                    inliers_teacher: None,
                    loss_depth: None,
                    loss_pseudo: None,
                    loss_entropy: None,
                    updated: false,
                    skipped_update: false,
                });
            }
        }
        Method::Tent => {
            let mut student = pretrained.clone();
            let mut opt = OptimizerState::new(&student, cfg.learning_rate);
            let mask = tent_parameter_mask(&student);
            for (i, cloud) in clouds.iter().enumerate() {
                let frame_number = i as u64 + 1;
                let ransac = cfg.ransac_for_frame(frame_number);
                let mut loss_entropy = None;
                let mut updated = false;
                if frame_number % cfg.update_interval == 0 {
                    loss_entropy = Some(entropy_loss_step(&mut student, cloud, &mut opt, &mask)?);
                    updated = true;
                    updates += 1;
                }
                let (pose, est_size, inl) = plain_inference(&student, cloud, cfg, &ransac)?;
                frames.push(FrameOutput {
                    frame: i,
                    pose,
                    est_size,
                    winner: None,
                    inliers_student: inl,
                    inliers_teacher: None,
                    loss_depth: None,
                    loss_pseudo: None,
                    loss_entropy,
                    updated,
                    skipped_update: false,
                });
            }
        }
        Method::Pl | Method::PlFiltered => {
            let mut student = pretrained.clone();
            let mut teacher = pretrained.clone();
            let mut opt = OptimizerState::new(&student, cfg.learning_rate);
            for (i, cloud) in clouds.iter().enumerate() {
                let frame_number = i as u64 + 1;
                let ransac = cfg.ransac_for_frame(frame_number);
                let feats = point_features(cloud);
                let mut loss_pseudo = None;
                let mut updated = false;
                let mut skipped_update = false;
                let mut inliers_teacher = None;
                if frame_number % cfg.update_interval == 0 {
                    let s_map = forward(&student, &feats)?;
                    let t_map = forward(&teacher, &feats)?;
                    let mask = if method == Method::PlFiltered {
                        match point_filter(cloud, &t_map, cfg.rho, &ransac) {
                            Ok(tf) => {
                                inliers_teacher = Some(tf.inlier_count);
                                Some(tf.inlier_mask)
                            }
                            Err(_) => None,
                        }
                    } else {
                        None
                    };
                    let needs_mask = method == Method::PlFiltered;
                    if needs_mask && mask.is_none() {
                        skipped_update = true;
                        skipped += 1;
                        log::warn!("frame {frame_number}: no usable teacher fit, skipping update");
                    } else {
                        match pseudo_label_loss(&s_map, &t_map, mask.as_deref()) {
                            Ok((lp, gp)) => {
                                let grads = backward(&student, &feats, &gp)?;
                                adam_step(&mut student, &grads, &mut opt);
                                ema_update(&mut teacher, &student, cfg.gamma)?;
                                loss_pseudo = Some(lp);
                                updated = true;
                                updates += 1;
                            }
                            Err(Error::EmptyMask) => {
                                skipped_update = true;
                                skipped += 1;
                                log::warn!(
                                    "frame {frame_number}: empty inlier set, skipping update"
                                );
                            }
                            Err(e) => return Err(e),
                        }
                    }
                }
                let (pose, est_size, inl) = plain_inference(&student, cloud, cfg, &ransac)?;
                frames.push(FrameOutput {
                    frame: i,
                    pose,
                    est_size,
                    winner: None,
                    inliers_student: inl,
                    inliers_teacher,
                    loss_depth: None,
                    loss_pseudo,
                    loss_entropy: None,
                    updated,
                    skipped_update,
                });
            }
        }
        Method::TtaCope => {
            let mut student = pretrained.clone();
            let mut teacher = pretrained.clone();
            let mut opt = OptimizerState::new(&student, cfg.learning_rate);
            for (i, cloud) in clouds.iter().enumerate() {
                let out = tta_step(&mut student, &mut teacher, &mut opt, cloud, i as u64 + 1, cfg)?;
                if out.updated {
                    updates += 1;
                }
                if out.skipped_update {
                    skipped += 1;
                }
                frames.push(FrameOutput {
                    frame: i,
                    pose: out.pose,
                    est_size: out.est_size,
                    winner: out.winner,
                    inliers_student: out.inliers_student,
                    inliers_teacher: out.inliers_teacher,
                    loss_depth: out.loss_depth,
                    loss_pseudo: out.loss_pseudo,
                    loss_entropy: None,
                    updated: out.updated,
                    skipped_update: out.skipped_update,
                });
            }
        }
    }

    Ok(MethodRun {
        summary: RunSummary {
            method,
            frames: frames.len(),
            updates,
            skipped_updates: skipped,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
        frames,
    })
}
