//! Geometric point filtering and student/teacher ensembling.
//!
//! A predicted coordinate map plus the observed cloud give a robust pose;
//! mapping the observation back through that pose exposes which points the
//! prediction actually explains. Inlier counts then arbitrate between the
//! student and teacher models, and logit-level fusion offers alternative
//! ensembling schemes for comparison.

use nalgebra::Vector3;
use serde::Serialize;
use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::geometry::{
    apply_similarity, ransac_umeyama, ObservedCloud, RansacConfig, SimilarityTransform,
};
use crate::nocs::{decode_bins, softmax, NocsMap};

/// Offset of the coordinate-space origin: poses map centered coordinates
/// `n - CENTER` into the camera frame, so a pose's translation is the
/// object center.
pub const CENTER: f64 = 0.5;

/// Outcome of fitting a predicted map against the observation.
#[derive(Clone, Debug)]
pub struct FilterResult {
    pub pose: SimilarityTransform,
    /// Per-point agreement with the fitted pose, `residual ≤ rho`.
    pub inlier_mask: Vec<bool>,
    pub inlier_count: usize,
    /// Observed points mapped into coordinate space through the inverse
    /// pose; same indexing as the cloud.
    pub nocs_space_depth: Vec<Vector3<f64>>,
}

/// Fits a pose between decoded coordinates and the observed cloud, then
/// marks the points whose back-projected observation lands within `rho` of
/// the predicted coordinate.
pub fn point_filter(
    cloud: &ObservedCloud,
    map: &NocsMap,
    rho: f64,
    ransac: &RansacConfig,
) -> Result<FilterResult, Error> {
    if map.points() != cloud.len() {
        return Err(Error::ShapeMismatch(format!(
            "map {} points vs cloud {}",
            map.points(),
            cloud.len()
        )));
    }
    let decoded = decode_bins(map);
    let centered: Vec<Vector3<f64>> = decoded
        .iter()
        .map(|n| n - Vector3::from_element(CENTER))
        .collect();
    let (pose, _) = ransac_umeyama(&centered, cloud.points(), ransac)?;

    let inv = pose.inverse();
    let nocs_space_depth: Vec<Vector3<f64>> = apply_similarity(&inv, cloud.points())
        .into_iter()
        .map(|p| p + Vector3::from_element(CENTER))
        .collect();
    let inlier_mask: Vec<bool> = nocs_space_depth
        .iter()
        .zip(&decoded)
        .map(|(d, n)| (d - n).norm() <= rho)
        .collect();
    let inlier_count = inlier_mask.iter().filter(|&&b| b).count();
    Ok(FilterResult { pose, inlier_mask, inlier_count, nocs_space_depth })
}

/// Which model a fused output came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTag {
    Student,
    Teacher,
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelTag::Student => write!(f, "student"),
            ModelTag::Teacher => write!(f, "teacher"),
        }
    }
}

/// Picks the pose whose fit explains more points. The teacher wins ties; it
/// is the slower-moving, more trustworthy model.
pub fn pose_ensemble_inlier_max<'a>(
    student: &'a FilterResult,
    teacher: &'a FilterResult,
) -> (&'a SimilarityTransform, ModelTag) {
    if student.inlier_count > teacher.inlier_count {
        (&student.pose, ModelTag::Student)
    } else {
        (&teacher.pose, ModelTag::Teacher)
    }
}

/// Ensembling scheme. Input-level modes fuse logits before pose fitting;
/// output-level modes pick between the two fitted poses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum EnsembleMode {
    /// Keep student logits where both models agree on the bin, teacher
    /// logits elsewhere.
    InputArgmaxMatch,
    /// Log of the mean of the two softmax distributions.
    InputSoftmaxAverage,
    /// Log of the renormalised element-wise max of the two distributions.
    InputSoftmaxMax,
    /// Pose of the model with higher mean top-softmax confidence over its
    /// own inliers.
    OutputSoftmaxMax,
    /// Pose of the model with more filter inliers.
    InlierMax,
}

impl EnsembleMode {
    pub fn is_input_level(self) -> bool {
        matches!(
            self,
            EnsembleMode::InputArgmaxMatch
                | EnsembleMode::InputSoftmaxAverage
                | EnsembleMode::InputSoftmaxMax
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EnsembleMode::InputArgmaxMatch => "in-argmax-match",
            EnsembleMode::InputSoftmaxAverage => "in-softmax-avg",
            EnsembleMode::InputSoftmaxMax => "in-softmax-max",
            EnsembleMode::OutputSoftmaxMax => "out-softmax-max",
            EnsembleMode::InlierMax => "inlier-max",
        }
    }
}

impl fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnsembleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "in-argmax-match" => Ok(EnsembleMode::InputArgmaxMatch),
            "in-softmax-avg" => Ok(EnsembleMode::InputSoftmaxAverage),
            "in-softmax-max" => Ok(EnsembleMode::InputSoftmaxMax),
            "out-softmax-max" => Ok(EnsembleMode::OutputSoftmaxMax),
            "inlier-max" => Ok(EnsembleMode::InlierMax),
            other => Err(Error::UnknownEnsemble(other.to_string())),
        }
    }
}

/// Fuses two logit maps with an input-level mode. The fused map feeds one
/// pose fit instead of two.
pub fn input_ensemble(
    student: &NocsMap,
    teacher: &NocsMap,
    mode: EnsembleMode,
) -> Result<NocsMap, Error> {
    if !mode.is_input_level() {
        return Err(Error::EnsembleLevel("input_ensemble needs an input-level mode"));
    }
    if student.points() != teacher.points() || student.bins() != teacher.bins() {
        return Err(Error::ShapeMismatch(format!(
            "student {}x{} vs teacher {}x{}",
            student.points(),
            student.bins(),
            teacher.points(),
            teacher.bins()
        )));
    }
    let bins = student.bins();
    let mut fused = Vec::with_capacity(student.logits().len());
    for p in 0..student.points() {
        for axis in 0..3 {
            let s_row = student.row(p, axis);
            let t_row = teacher.row(p, axis);
            match mode {
                EnsembleMode::InputArgmaxMatch => {
                    let am = |row: &[f64]| {
                        let mut best = 0;
                        for (b, &v) in row.iter().enumerate() {
                            if v > row[best] {
                                best = b;
                            }
                        }
                        best
                    };
                    let row = if am(s_row) == am(t_row) { s_row } else { t_row };
                    fused.extend_from_slice(row);
                }
                EnsembleMode::InputSoftmaxAverage => {
                    let sp = softmax(s_row);
                    let tp = softmax(t_row);
                    for b in 0..bins {
                        fused.push((0.5 * (sp[b] + tp[b])).max(f64::MIN_POSITIVE).ln());
                    }
                }
                EnsembleMode::InputSoftmaxMax => {
                    let sp = softmax(s_row);
                    let tp = softmax(t_row);
                    let raw: Vec<f64> = (0..bins).map(|b| sp[b].max(tp[b])).collect();
                    let norm: f64 = raw.iter().sum();
                    for v in raw {
                        fused.push((v / norm).max(f64::MIN_POSITIVE).ln());
                    }
                }
                _ => unreachable!(),
            }
        }
    }
    NocsMap::from_logits(student.points(), bins, fused)
}

/// Mean top-softmax probability over a model's own inlier points, the
/// confidence score for [`output_ensemble_softmax_max`].
fn inlier_confidence(map: &NocsMap, filter: &FilterResult) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..map.points() {
        if !filter.inlier_mask[p] {
            continue;
        }
        for axis in 0..3 {
            let row = map.row(p, axis);
            let probs = softmax(row);
            total += probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            count += 1;
        }
    }
    if count == 0 {
        return 0.0;
    }
    total / count as f64
}

/// Output-level alternative to inlier counting: trust the model whose
/// predictions are more confident on the points it explains. The teacher
/// wins ties.
pub fn output_ensemble_softmax_max<'a>(
    student: &'a FilterResult,
    student_map: &NocsMap,
    teacher: &'a FilterResult,
    teacher_map: &NocsMap,
) -> (&'a SimilarityTransform, ModelTag) {
    let sc = inlier_confidence(student_map, student);
    let tc = inlier_confidence(teacher_map, teacher);
    if sc > tc {
        (&student.pose, ModelTag::Student)
    } else {
        (&teacher.pose, ModelTag::Teacher)
    }
}
