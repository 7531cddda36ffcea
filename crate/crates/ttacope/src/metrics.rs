//! Pose evaluation: oriented-box IoU, rotation/translation errors and
//! threshold accuracies.
//!
//! Boxes are metric: the pose supplies center and orientation, `extents` the
//! side lengths. Intersection volume is computed exactly by clipping each
//! bounding half-space's face polygon against all the others and applying the
//! divergence theorem, so the IoU carries no sampling error.

use nalgebra::Vector3;
use serde::Serialize;
use std::collections::BTreeMap;

use crate::error::Error;
use crate::geometry::{rotation_geodesic_deg, SimilarityTransform};
use crate::synth::Symmetry;

/// Metric oriented bounding box. Center `pose.translation`, axes the columns
/// of `pose.rotation`, side lengths `extents` (meters). The pose's scale
/// field is not part of the box geometry.
#[derive(Clone, Debug)]
pub struct OrientedBox {
    pub pose: SimilarityTransform,
    pub extents: Vector3<f64>,
}

impl OrientedBox {
    pub fn new(pose: SimilarityTransform, extents: Vector3<f64>) -> Self {
        assert!(extents.iter().all(|&e| e > 0.0), "box extents must be positive");
        Self { pose, extents }
    }

    pub fn volume(&self) -> f64 {
        self.extents.x * self.extents.y * self.extents.z
    }

    /// Outward half-space representation: 6 planes `(n, d)` with the inside
    /// satisfying `n·x ≤ d`.
    fn planes(&self) -> Vec<(Vector3<f64>, f64)> {
        let mut planes = Vec::with_capacity(6);
        for axis in 0..3 {
            let n: Vector3<f64> = self.pose.rotation.column(axis).into();
            let half = self.extents[axis] / 2.0;
            let c = n.dot(&self.pose.translation);
            planes.push((n, c + half));
            planes.push((-n, -c + half));
        }
        planes
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let q = self.pose.rotation.transpose() * (p - self.pose.translation);
        (0..3).all(|i| q[i].abs() <= self.extents[i] / 2.0 + 1e-12)
    }
}

const CLIP_EPS: f64 = 1e-12;

fn clip_polygon(poly: &[Vector3<f64>], n: &Vector3<f64>, d: f64) -> Vec<Vector3<f64>> {
    if poly.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let cur = poly[i];
        let nxt = poly[(i + 1) % poly.len()];
        let dc = n.dot(&cur) - d;
        let dn = n.dot(&nxt) - d;
        let cur_in = dc <= CLIP_EPS;
        let nxt_in = dn <= CLIP_EPS;
        if cur_in {
            out.push(cur);
        }
        if cur_in != nxt_in {
            let t = dc / (dc - dn);
            out.push(cur + t * (nxt - cur));
        }
    }
    out
}

fn polygon_area(poly: &[Vector3<f64>]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = Vector3::zeros();
    for i in 0..poly.len() {
        acc += poly[i].cross(&poly[(i + 1) % poly.len()]);
    }
    acc.norm() / 2.0
}

fn same_plane(a: &(Vector3<f64>, f64), b: &(Vector3<f64>, f64)) -> bool {
    (a.0 - b.0).amax() <= 1e-12 && (a.1 - b.1).abs() <= 1e-12
}

/// Volume of the convex polytope given by half-spaces `n·x ≤ d`.
///
/// Planes are canonically sorted first so the result is bit-identical under
/// reordering of the input.
fn halfspace_volume(mut planes: Vec<(Vector3<f64>, f64)>) -> f64 {
    planes.sort_by(|a, b| {
        a.0.x
            .total_cmp(&b.0.x)
            .then(a.0.y.total_cmp(&b.0.y))
            .then(a.0.z.total_cmp(&b.0.z))
            .then(a.1.total_cmp(&b.1))
    });

    // A face quad large enough to cover any desk-scale scene.
    const BIG: f64 = 1e3;
    let mut volume = 0.0;
    for i in 0..planes.len() {
        if planes[..i].iter().any(|p| same_plane(p, &planes[i])) {
            continue;
        }
        let (n, d) = planes[i];
        let pick = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let u = n.cross(&pick).normalize();
        let v = n.cross(&u);
        let c = n * d;
        let mut poly = vec![
            c + BIG * (u + v),
            c + BIG * (v - u),
            c - BIG * (u + v),
            c + BIG * (u - v),
        ];
        for (j, plane) in planes.iter().enumerate() {
            if j == i || same_plane(plane, &planes[i]) {
                continue;
            }
            poly = clip_polygon(&poly, &plane.0, plane.1);
            if poly.is_empty() {
                break;
            }
        }
        volume += d * polygon_area(&poly);
    }
    (volume / 3.0).max(0.0)
}

/// Exact intersection-over-union of two oriented boxes.
pub fn iou_3d(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let mut planes = a.planes();
    planes.extend(b.planes());
    let va = a.volume();
    let vb = b.volume();
    let inter = halfspace_volume(planes).min(va.min(vb));
    let union = va + vb - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Rotation and translation error of an estimate against a reference.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PoseError {
    pub rot_deg: f64,
    pub trans_m: f64,
}

/// For axially symmetric categories only the image of the symmetry axis
/// matters; otherwise the full geodesic rotation distance is used.
pub fn pose_error(
    est: &SimilarityTransform,
    gt: &SimilarityTransform,
    symmetry: Symmetry,
) -> PoseError {
    let trans_m = (est.translation - gt.translation).norm();
    let rot_deg = match symmetry {
        Symmetry::None => rotation_geodesic_deg(&est.rotation, &gt.rotation),
        Symmetry::Axial(axis) => {
            let ea: Vector3<f64> = est.rotation.column(axis).into();
            let ga: Vector3<f64> = gt.rotation.column(axis).into();
            ea.dot(&ga).clamp(-1.0, 1.0).acos().to_degrees()
        }
    };
    PoseError { rot_deg, trans_m }
}

/// Rotates `est` about its own symmetry axis so its in-plane axes best align
/// with the reference before overlap is measured. Identity for asymmetric
/// categories.
pub fn symmetric_aligned_box(
    est: &OrientedBox,
    reference: &OrientedBox,
    symmetry: Symmetry,
) -> OrientedBox {
    let axis = match symmetry {
        Symmetry::None => return est.clone(),
        Symmetry::Axial(a) => a,
    };
    let b1 = (axis + 1) % 3;
    let b2 = (axis + 2) % 3;
    // Reference's b1 axis expressed in the estimate's body frame.
    let target: Vector3<f64> = reference.pose.rotation.column(b1).into();
    let u = est.pose.rotation.transpose() * target;
    let phi = u[b2].atan2(u[b1]);
    let mut e = Vector3::zeros();
    e[axis] = 1.0;
    let spin = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(e), phi);
    let mut aligned = est.clone();
    aligned.pose.rotation = est.pose.rotation * spin.into_inner();
    aligned
}

/// Everything needed to score one frame.
#[derive(Clone, Debug)]
pub struct FrameEval {
    pub est_pose: SimilarityTransform,
    pub est_size: Vector3<f64>,
    pub gt_pose: SimilarityTransform,
    pub gt_size: Vector3<f64>,
    pub category: String,
    pub symmetry: Symmetry,
}

/// Per-frame raw scores.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FrameScores {
    pub rot_deg: f64,
    pub trans_m: f64,
    pub iou: f64,
}

pub fn evaluate_frame(eval: &FrameEval) -> FrameScores {
    let err = pose_error(&eval.est_pose, &eval.gt_pose, eval.symmetry);
    let gt_box = OrientedBox::new(eval.gt_pose.clone(), eval.gt_size);
    let est_box = OrientedBox::new(eval.est_pose.clone(), eval.est_size);
    let est_box = symmetric_aligned_box(&est_box, &gt_box, eval.symmetry);
    FrameScores { rot_deg: err.rot_deg, trans_m: err.trans_m, iou: iou_3d(&est_box, &gt_box) }
}

/// Aggregate accuracy fractions. `deg5cm2` is the fraction of frames with
/// rotation error under 5° and translation error under 2 cm, and so on.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Scores {
    pub frames: usize,
    pub iou50: f64,
    pub iou75: f64,
    pub deg5cm2: f64,
    pub deg5cm5: f64,
    pub deg10cm2: f64,
    pub deg10cm5: f64,
    pub mean_rot_deg: f64,
    pub mean_trans_m: f64,
}

pub const SCORE_CSV_HEADER: &str = "iou50,iou75,deg5cm2,deg5cm5,deg10cm2,deg10cm5";

impl Scores {
    fn from_frames(scores: &[FrameScores]) -> Self {
        let n = scores.len() as f64;
        let frac = |pred: &dyn Fn(&FrameScores) -> bool| {
            scores.iter().filter(|s| pred(s)).count() as f64 / n
        };
        Self {
            frames: scores.len(),
            iou50: frac(&|s| s.iou >= 0.5),
            iou75: frac(&|s| s.iou >= 0.75),
            deg5cm2: frac(&|s| s.rot_deg < 5.0 && s.trans_m < 0.02),
            deg5cm5: frac(&|s| s.rot_deg < 5.0 && s.trans_m < 0.05),
            deg10cm2: frac(&|s| s.rot_deg < 10.0 && s.trans_m < 0.02),
            deg10cm5: frac(&|s| s.rot_deg < 10.0 && s.trans_m < 0.05),
            mean_rot_deg: scores.iter().map(|s| s.rot_deg).sum::<f64>() / n,
            mean_trans_m: scores.iter().map(|s| s.trans_m).sum::<f64>() / n,
        }
    }

    /// Values for [`SCORE_CSV_HEADER`], fixed order and formatting.
    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.iou50, self.iou75, self.deg5cm2, self.deg5cm5, self.deg10cm2, self.deg10cm5
        )
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct EvalSummary {
    pub overall: Scores,
    pub per_category: BTreeMap<String, Scores>,
}

/// Scores a set of frames overall and per category.
pub fn summarize(frames: &[FrameEval]) -> Result<EvalSummary, Error> {
    if frames.is_empty() {
        return Err(Error::EmptyInput);
    }
    let scored: Vec<(String, FrameScores)> = frames
        .iter()
        .map(|f| (f.category.clone(), evaluate_frame(f)))
        .collect();
    let all: Vec<FrameScores> = scored.iter().map(|(_, s)| *s).collect();
    let mut by_cat: BTreeMap<String, Vec<FrameScores>> = BTreeMap::new();
    for (cat, s) in scored {
        by_cat.entry(cat).or_default().push(s);
    }
    Ok(EvalSummary {
        overall: Scores::from_frames(&all),
        per_category: by_cat
            .into_iter()
            .map(|(cat, list)| (cat, Scores::from_frames(&list)))
            .collect(),
    })
}
