//! Similarity-transform algebra and pose fitting between corresponded point
//! sets, with a RANSAC wrapper for contaminated correspondences.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;

/// Tolerance for the orthonormality / unit-determinant check on rotations.
pub const ROTATION_TOL: f64 = 1e-9;

/// Uniform-scale rigid transform, `p ↦ s·R·p + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    /// Builds a transform after checking that `rotation` is a proper rotation
    /// and `scale` is positive.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, scale: f64) -> Result<Self, Error> {
        let t = Self { rotation, translation, scale };
        if !t.is_valid() {
            return Err(Error::DegenerateInput("not a proper similarity transform"));
        }
        Ok(t)
    }

    /// True when the rotation block is orthonormal with determinant one
    /// (within [`ROTATION_TOL`]) and the scale is positive and finite.
    pub fn is_valid(&self) -> bool {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return false;
        }
        if self.translation.iter().any(|v| !v.is_finite())
            || self.rotation.iter().any(|v| !v.is_finite())
        {
            return false;
        }
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        gram.iter().all(|v| v.abs() <= ROTATION_TOL)
            && (self.rotation.determinant() - 1.0).abs() <= ROTATION_TOL
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Inverse transform: `(1/s, Rᵀ, -(1/s)·Rᵀ·t)`.
    pub fn inverse(&self) -> Self {
        let rot_t = self.rotation.transpose();
        let inv_scale = 1.0 / self.scale;
        Self {
            rotation: rot_t,
            translation: -inv_scale * (rot_t * self.translation),
            scale: inv_scale,
        }
    }

    /// Composition `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
            scale: self.scale * other.scale,
        }
    }
}

/// Depth observation of a single object, at least four points.
#[derive(Clone, Debug)]
pub struct ObservedCloud {
    points: Vec<Vector3<f64>>,
}

impl ObservedCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, Error> {
        if points.len() < 4 {
            return Err(Error::TooFewPoints { min: 4, actual: points.len() });
        }
        if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("cloud point"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Parameters for [`ransac_umeyama`].
#[derive(Clone, Debug, PartialEq)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub sample_size: usize,
    /// Inlier threshold on the residual in source (model) space.
    pub inlier_threshold: f64,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 512,
            sample_size: 4,
            inlier_threshold: 0.05,
            rng_seed: 0,
        }
    }
}

fn mean(points: &[Vector3<f64>]) -> Vector3<f64> {
    let mut m = Vector3::zeros();
    for p in points {
        m += p;
    }
    m / points.len() as f64
}

/// Singular values of the centered scatter matrix `Σ (p-μ)(p-μ)ᵀ / n`,
/// sorted descending. Zero trailing values flag collinear or coincident sets.
pub(crate) fn scatter_singular_values(points: &[Vector3<f64>]) -> [f64; 3] {
    let mu = mean(points);
    let mut scatter = Matrix3::zeros();
    for p in points {
        let c = p - mu;
        scatter += c * c.transpose();
    }
    scatter /= points.len() as f64;
    let mut sv: Vec<f64> = scatter
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    [sv[0], sv[1], sv[2]]
}

/// Principal axes of the centered scatter matrix, as unit eigenvectors paired
/// with their eigenvalues, sorted by eigenvalue descending.
///
/// Eigenvector signs are made canonical by flipping each vector so that its
/// largest-magnitude component is positive. Without that step the sign is an
/// arbitrary artifact of the eigensolver and identical clouds could produce
/// different frames.
pub(crate) fn scatter_frame(points: &[Vector3<f64>]) -> [(f64, Vector3<f64>); 3] {
    let mu = mean(points);
    let mut scatter = Matrix3::zeros();
    for p in points {
        let c = p - mu;
        scatter += c * c.transpose();
    }
    scatter /= points.len() as f64;
    let eig = scatter.symmetric_eigen();
    let mut axes: Vec<(f64, Vector3<f64>)> = (0..3)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned()))
        .collect();
    axes.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (_, v) in axes.iter_mut() {
        let mut lead = 0;
        for k in 1..3 {
            if v[k].abs() > v[lead].abs() {
                lead = k;
            }
        }
        if v[lead] < 0.0 {
            *v = -*v;
        }
    }
    [axes[0], axes[1], axes[2]]
}

/// Closed-form least-squares similarity fit mapping `src` onto `dst`.
///
/// Minimises `Σ ‖dst_i - (s·R·src_i + t)‖²` over rotation, translation and a
/// single positive scale. Exact for noiseless correspondences generated by a
/// true similarity transform.
pub fn umeyama_fit(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<SimilarityTransform, Error> {
    if src.len() != dst.len() {
        return Err(Error::SizeMismatch { src: src.len(), dst: dst.len() });
    }
    if src.len() < 3 {
        return Err(Error::DegenerateInput("need at least 3 correspondences"));
    }
    let sv = scatter_singular_values(src);
    if sv[1] < 1e-12 {
        return Err(Error::DegenerateInput("source points are collinear or coincident"));
    }

    let n = src.len() as f64;
    let src_mean = mean(src);
    let dst_mean = mean(dst);
    let mut src_var = 0.0;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let sc = s - src_mean;
        let dc = d - dst_mean;
        src_var += sc.norm_squared();
        cov += dc * sc.transpose();
    }
    src_var /= n;
    cov /= n;

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or(Error::DegenerateInput("svd failed"))?;
    let v_t = svd.v_t.ok_or(Error::DegenerateInput("svd failed"))?;
    // Sort singular triplets descending ourselves; permuting U and V columns
    // together leaves the product unchanged.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut d = Vector3::zeros();
    let mut u_s = Matrix3::zeros();
    let mut vt_s = Matrix3::zeros();
    for (k, &i) in order.iter().enumerate() {
        d[k] = svd.singular_values[i];
        u_s.set_column(k, &u.column(i));
        vt_s.set_row(k, &v_t.row(i));
    }

    let sign = if u_s.determinant() * vt_s.determinant() < 0.0 { -1.0 } else { 1.0 };
    let rotation = u_s * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign)) * vt_s;
    let scale = (d[0] + d[1] + sign * d[2]) / src_var;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::DegenerateInput("non-positive fitted scale"));
    }
    let translation = dst_mean - scale * (rotation * src_mean);
    Ok(SimilarityTransform { rotation, translation, scale })
}

/// Applies `pose` to every point.
pub fn apply_similarity(pose: &SimilarityTransform, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    points.iter().map(|p| pose.apply(p)).collect()
}

/// See [`SimilarityTransform::inverse`]; free-function form.
pub fn invert_similarity(pose: &SimilarityTransform) -> SimilarityTransform {
    pose.inverse()
}

/// Robust similarity fit. Samples minimal subsets, scores hypotheses by the
/// residual `‖T⁻¹·dst_j - src_j‖` in source space, refits on the largest
/// consensus set and returns the final pose with its inlier mask.
///
/// Fully deterministic for a fixed `cfg.rng_seed`.
pub fn ransac_umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    cfg: &RansacConfig,
) -> Result<(SimilarityTransform, Vec<bool>), Error> {
    if src.len() != dst.len() {
        return Err(Error::SizeMismatch { src: src.len(), dst: dst.len() });
    }
    if cfg.sample_size < 3 {
        return Err(Error::DegenerateInput("sample size must be at least 3"));
    }
    let n = src.len();
    if n < cfg.sample_size {
        return Err(Error::DegenerateInput("fewer correspondences than sample size"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut best: Option<(usize, SimilarityTransform)> = None;
    let mut sample_src = Vec::with_capacity(cfg.sample_size);
    let mut sample_dst = Vec::with_capacity(cfg.sample_size);

    for _ in 0..cfg.max_iterations {
        let idx = rand::seq::index::sample(&mut rng, n, cfg.sample_size);
        sample_src.clear();
        sample_dst.clear();
        for i in idx.iter() {
            sample_src.push(src[i]);
            sample_dst.push(dst[i]);
        }
        // Reject samples whose source points are near-planar; those produce
        // unstable or reflected fits.
        if scatter_singular_values(&sample_src)[2] < 1e-12 {
            continue;
        }
        let hyp = match umeyama_fit(&sample_src, &sample_dst) {
            Ok(h) => h,
            Err(_) => continue,
        };
        let count = count_inliers(&hyp, src, dst, cfg.inlier_threshold);
        // Strictly-greater keeps the earliest best hypothesis on ties.
        if best.as_ref().map_or(true, |(c, _)| count > *c) {
            best = Some((count, hyp));
        }
    }

    let (_, hyp) = best.ok_or(Error::DegenerateInput("no non-degenerate minimal sample found"))?;
    let consensus = inlier_mask(&hyp, src, dst, cfg.inlier_threshold);
    let mut cons_src = Vec::new();
    let mut cons_dst = Vec::new();
    for (i, &keep) in consensus.iter().enumerate() {
        if keep {
            cons_src.push(src[i]);
            cons_dst.push(dst[i]);
        }
    }
    let final_pose = if cons_src.len() >= 3 {
        umeyama_fit(&cons_src, &cons_dst).unwrap_or(hyp)
    } else {
        hyp
    };
    let mask = inlier_mask(&final_pose, src, dst, cfg.inlier_threshold);
    Ok((final_pose, mask))
}

fn residual(pose_inv: &SimilarityTransform, s: &Vector3<f64>, d: &Vector3<f64>) -> f64 {
    (pose_inv.apply(d) - s).norm()
}

fn count_inliers(
    pose: &SimilarityTransform,
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    threshold: f64,
) -> usize {
    let inv = pose.inverse();
    src.iter()
        .zip(dst)
        .filter(|(s, d)| residual(&inv, s, d) <= threshold)
        .count()
}

fn inlier_mask(
    pose: &SimilarityTransform,
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    threshold: f64,
) -> Vec<bool> {
    let inv = pose.inverse();
    src.iter()
        .zip(dst)
        .map(|(s, d)| residual(&inv, s, d) <= threshold)
        .collect()
}

/// Geodesic distance between two rotations in degrees,
/// `arccos((tr(R₁ᵀR₂) - 1) / 2)` with the argument clamped to `[-1, 1]`.
pub fn rotation_geodesic_deg(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> f64 {
    let cos = (((r1.transpose() * r2).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    cos.acos().to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::Rng;

    pub(crate) fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        // Uniform over SO(3): normalised 4-gaussian quaternion.
        let q = loop {
            let v = nalgebra::Vector4::new(
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                break v / n;
            }
        };
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]))
            .to_rotation_matrix()
            .into_inner()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> SimilarityTransform {
        SimilarityTransform {
            rotation: random_rotation(rng),
            translation: Vector3::new(
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            ),
            scale: 0.3 + rng.random::<f64>() * 2.0,
        }
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                )
            })
            .collect()
    }

    #[test]
    fn identity_on_identical_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 50);
        let t = umeyama_fit(&pts, &pts).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-12);
        assert!(t.translation.norm() < 1e-12);
        assert!(rotation_geodesic_deg(&t.rotation, &Matrix3::identity()) < 1e-7);
    }

    #[test]
    fn recovers_known_transform_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let src = random_points(&mut rng, 30);
            let truth = random_pose(&mut rng);
            let dst = apply_similarity(&truth, &src);
            let fit = umeyama_fit(&src, &dst).unwrap();
            assert!((fit.scale - truth.scale).abs() < 1e-9);
            assert!((fit.translation - truth.translation).norm() < 1e-9);
            assert!((fit.rotation - truth.rotation).norm() < 1e-9);
        }
    }

    #[test]
    fn reflection_guard_yields_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let src = random_points(&mut rng, 8);
            // Arbitrary destination, not generated by a similarity; the fit
            // must still come back as a proper rotation.
            let dst = random_points(&mut rng, 8);
            if let Ok(fit) = umeyama_fit(&src, &dst) {
                assert!(fit.is_valid(), "det = {}", fit.rotation.determinant());
            }
        }
    }

    #[test]
    fn collinear_sources_are_rejected() {
        let src: Vec<_> = (0..10)
            .map(|i| Vector3::new(i as f64 * 0.1, 0.0, 0.0))
            .collect();
        let dst = src.clone();
        assert!(matches!(umeyama_fit(&src, &dst), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn coincident_sources_are_rejected() {
        let src = vec![Vector3::new(0.3, 0.2, 0.9); 6];
        let dst = src.clone();
        assert!(matches!(umeyama_fit(&src, &dst), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let a = vec![Vector3::zeros(); 5];
        let b = vec![Vector3::zeros(); 6];
        assert!(matches!(umeyama_fit(&a, &b), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn fit_is_left_equivariant() {
        // Post-transforming the destinations by G turns a fit T into G∘T.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let src = random_points(&mut rng, 20);
            let t = random_pose(&mut rng);
            let g = random_pose(&mut rng);
            let dst = apply_similarity(&t, &src);
            let dst_g: Vec<_> = dst.iter().map(|p| g.apply(p)).collect();
            let fit = umeyama_fit(&src, &dst_g).unwrap();
            let expect = g.compose(&t);
            assert!((fit.rotation - expect.rotation).norm() < 1e-8);
            assert!((fit.translation - expect.translation).norm() < 1e-8);
            assert!((fit.scale - expect.scale).abs() < 1e-8);
        }
    }

    #[test]
    fn inverse_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let t = random_pose(&mut rng);
            let id = t.compose(&t.inverse());
            assert!((id.rotation - Matrix3::identity()).norm() < 1e-12);
            assert!(id.translation.norm() < 1e-12);
            assert!((id.scale - 1.0).abs() < 1e-12);
            let p = Vector3::new(0.4, -0.2, 0.7);
            assert!((t.inverse().apply(&t.apply(&p)) - p).norm() < 1e-12);
        }
    }

    #[test]
    fn ransac_ignores_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..40 {
            let n = 100;
            let src = random_points(&mut rng, n);
            let truth = random_pose(&mut rng);
            let mut dst = apply_similarity(&truth, &src);
            // Corrupt 30% of the correspondences.
            let n_out = 30;
            let out_idx = rand::seq::index::sample(&mut rng, n, n_out);
            for i in out_idx.iter() {
                dst[i] += Vector3::new(
                    rng.random::<f64>() * 4.0 - 2.0,
                    rng.random::<f64>() * 4.0 - 2.0,
                    rng.random::<f64>() * 4.0 + 1.0,
                );
            }
            let cfg = RansacConfig { rng_seed: trial, ..RansacConfig::default() };
            let (fit, mask) = ransac_umeyama(&src, &dst, &cfg).unwrap();
            assert!(rotation_geodesic_deg(&fit.rotation, &truth.rotation) < 0.5);
            assert!((fit.translation - truth.translation).norm() < 0.005);
            // All uncorrupted correspondences must be inliers.
            let corrupted: std::collections::HashSet<usize> = out_idx.iter().collect();
            for j in 0..n {
                if !corrupted.contains(&j) {
                    assert!(mask[j], "clean correspondence {j} flagged as outlier");
                }
            }
        }
    }

    #[test]
    fn ransac_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let src = random_points(&mut rng, 60);
        let truth = random_pose(&mut rng);
        let mut dst = apply_similarity(&truth, &src);
        for i in 0..15 {
            dst[i] += Vector3::new(1.0, -2.0, 0.5);
        }
        let cfg = RansacConfig { rng_seed: 99, ..RansacConfig::default() };
        let (a, mask_a) = ransac_umeyama(&src, &dst, &cfg).unwrap();
        let (b, mask_b) = ransac_umeyama(&src, &dst, &cfg).unwrap();
        assert_eq!(a.rotation, b.rotation);
        assert_eq!(a.translation, b.translation);
        assert_eq!(a.scale, b.scale);
        assert_eq!(mask_a, mask_b);
    }

    #[test]
    fn ransac_mask_matches_final_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let src = random_points(&mut rng, 80);
        let truth = random_pose(&mut rng);
        let mut dst = apply_similarity(&truth, &src);
        for i in 0..20 {
            dst[i].x += 3.0;
        }
        let cfg = RansacConfig::default();
        let (fit, mask) = ransac_umeyama(&src, &dst, &cfg).unwrap();
        let inv = fit.inverse();
        for j in 0..src.len() {
            let r = (inv.apply(&dst[j]) - src[j]).norm();
            assert_eq!(mask[j], r <= cfg.inlier_threshold);
        }
    }

    #[test]
    fn geodesic_matches_quaternion_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let r1 = random_rotation(&mut rng);
            let r2 = random_rotation(&mut rng);
            let got = rotation_geodesic_deg(&r1, &r2);
            let q1 = UnitQuaternion::from_matrix(&r1);
            let q2 = UnitQuaternion::from_matrix(&r2);
            let expect = q1.angle_to(&q2).to_degrees();
            assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
        }
    }

    #[test]
    fn geodesic_handles_180_degrees() {
        let r = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        let d = rotation_geodesic_deg(&Matrix3::identity(), &r);
        assert!((d - 180.0).abs() < 1e-9);
        assert_eq!(rotation_geodesic_deg(&r, &r), 0.0);
    }

    #[test]
    fn cloud_requires_four_points() {
        let pts = vec![Vector3::zeros(); 3];
        assert!(matches!(
            ObservedCloud::new(pts),
            Err(Error::TooFewPoints { min: 4, actual: 3 })
        ));
        assert!(ObservedCloud::new(vec![Vector3::zeros(); 4]).is_ok());
    }

    #[test]
    fn cloud_rejects_non_finite_points() {
        let pts = vec![
            Vector3::zeros(),
            Vector3::new(f64::NAN, 0.0, 0.0),
            Vector3::zeros(),
            Vector3::zeros(),
        ];
        assert!(matches!(ObservedCloud::new(pts), Err(Error::NonFinite(_))));
    }
}
