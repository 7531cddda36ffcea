//! Binned normalized-object-coordinate representation.
//!
//! Coordinates live in the unit cube `[0, 1]³` with the object's bounding-box
//! diagonal scaled to one and its center at `(0.5, 0.5, 0.5)`. Each axis is
//! discretised into `B` bins and predicted as a classification problem, so a
//! prediction is a logit tensor of shape `points × 3 × B`.

use nalgebra::Vector3;

use crate::error::Error;

/// Default number of bins per axis.
pub const DEFAULT_BINS: usize = 32;

/// Per-point, per-axis classification logits over coordinate bins.
#[derive(Clone, Debug)]
pub struct NocsMap {
    logits: Vec<f64>,
    points: usize,
    bins: usize,
}

impl NocsMap {
    /// Wraps a row-major `[point][axis][bin]` logit buffer.
    pub fn from_logits(points: usize, bins: usize, logits: Vec<f64>) -> Result<Self, Error> {
        assert!(bins >= 2, "need at least 2 bins per axis");
        if logits.len() != points * 3 * bins {
            return Err(Error::ShapeMismatch(format!(
                "expected {} logits for {} points x 3 x {} bins, got {}",
                points * 3 * bins,
                points,
                bins,
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logit"));
        }
        Ok(Self { logits, points, bins })
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Logit slice for one `(point, axis)` row.
    pub fn row(&self, point: usize, axis: usize) -> &[f64] {
        let start = (point * 3 + axis) * self.bins;
        &self.logits[start..start + self.bins]
    }
}

/// Per-point, per-axis target bin indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NocsTarget {
    indices: Vec<usize>,
    points: usize,
    bins: usize,
}

impl NocsTarget {
    pub fn from_indices(points: usize, bins: usize, indices: Vec<usize>) -> Result<Self, Error> {
        assert!(bins >= 2, "need at least 2 bins per axis");
        if indices.len() != points * 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected {} indices for {} points, got {}",
                points * 3,
                points,
                indices.len()
            )));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= bins) {
            return Err(Error::ShapeMismatch(format!("bin index {bad} out of range (bins = {bins})")));
        }
        Ok(Self { indices, points, bins })
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn index(&self, point: usize, axis: usize) -> usize {
        self.indices[point * 3 + axis]
    }

    /// Target restricted to a subset of points, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut indices = Vec::with_capacity(rows.len() * 3);
        for &r in rows {
            indices.extend_from_slice(&self.indices[r * 3..r * 3 + 3]);
        }
        Self { indices, points: rows.len(), bins: self.bins }
    }
}

/// Quantises coordinates into bin indices: clamp to `[0, 1]`, then
/// `min(floor(c·B), B-1)` so that `c = 1.0` lands in the last bin.
pub fn encode_bins(coords: &[Vector3<f64>], bins: usize) -> NocsTarget {
    assert!(bins >= 2, "need at least 2 bins per axis");
    let bf = bins as f64;
    let mut indices = Vec::with_capacity(coords.len() * 3);
    for c in coords {
        for axis in 0..3 {
            let v = c[axis].clamp(0.0, 1.0);
            indices.push(((v * bf).floor() as usize).min(bins - 1));
        }
    }
    NocsTarget { indices, points: coords.len(), bins }
}

/// Most likely bin per `(point, axis)`; ties resolve to the lower index.
pub fn argmax_bins(map: &NocsMap) -> NocsTarget {
    let mut indices = Vec::with_capacity(map.points * 3);
    for p in 0..map.points {
        for axis in 0..3 {
            let row = map.row(p, axis);
            let mut best = 0;
            for (b, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = b;
                }
            }
            indices.push(best);
        }
    }
    NocsTarget { indices, points: map.points, bins: map.bins }
}

/// Continuous coordinates from a map: bin-center of the argmax,
/// `(argmax + 0.5) / B` per axis.
pub fn decode_bins(map: &NocsMap) -> Vec<Vector3<f64>> {
    let t = argmax_bins(map);
    let bf = map.bins as f64;
    (0..map.points)
        .map(|p| {
            Vector3::new(
                (t.index(p, 0) as f64 + 0.5) / bf,
                (t.index(p, 1) as f64 + 0.5) / bf,
                (t.index(p, 2) as f64 + 0.5) / bf,
            )
        })
        .collect()
}

/// Max-shifted softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// `log(Σ exp(z - m))` for a row already knowing the max `m`.
fn log_sum_exp(logits: &[f64]) -> (f64, f64) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|&z| (z - m).exp()).sum();
    (m, s.ln())
}

/// Mean cross-entropy between a map and target bins, with the exact gradient
/// with respect to every logit (same layout as [`NocsMap::logits`]).
///
/// `mask`, when given, restricts the mean to the selected points; selecting
/// none is an error. The normaliser is the number of `(point, axis)` terms.
pub fn cross_entropy(
    map: &NocsMap,
    target: &NocsTarget,
    mask: Option<&[bool]>,
) -> Result<(f64, Vec<f64>), Error> {
    if map.points != target.points || map.bins != target.bins {
        return Err(Error::ShapeMismatch(format!(
            "map {}x{} vs target {}x{}",
            map.points, map.bins, target.points, target.bins
        )));
    }
    if let Some(m) = mask {
        if m.len() != map.points {
            return Err(Error::ShapeMismatch(format!(
                "mask length {} vs {} points",
                m.len(),
                map.points
            )));
        }
    }
    let selected: Vec<usize> = match mask {
        Some(m) => (0..map.points).filter(|&p| m[p]).collect(),
        None => (0..map.points).collect(),
    };
    if selected.is_empty() {
        return Err(Error::EmptyMask);
    }

    let count = (selected.len() * 3) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; map.logits.len()];
    for &p in &selected {
        for axis in 0..3 {
            let row = map.row(p, axis);
            let (m, lse) = log_sum_exp(row);
            let t = target.index(p, axis);
            loss += m + lse - row[t];
            let base = (p * 3 + axis) * map.bins;
            for (b, &z) in row.iter().enumerate() {
                let prob = (z - m - lse).exp();
                let one = if b == t { 1.0 } else { 0.0 };
                grad[base + b] = (prob - one) / count;
            }
        }
    }
    Ok((loss / count, grad))
}

/// Mean per-row Shannon entropy of the map's softmax distributions.
pub fn entropy(map: &NocsMap) -> f64 {
    entropy_with_grad(map).0
}

/// Entropy with its gradient with respect to every logit.
pub fn entropy_with_grad(map: &NocsMap) -> (f64, Vec<f64>) {
    let count = (map.points * 3) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; map.logits.len()];
    for p in 0..map.points {
        for axis in 0..3 {
            let row = map.row(p, axis);
            let (m, lse) = log_sum_exp(row);
            let mut h = 0.0;
            let base = (p * 3 + axis) * map.bins;
            // log-probs first; p·log p with p = 0 contributes zero.
            for &z in row {
                let lp = z - m - lse;
                h -= lp.exp() * lp;
            }
            total += h;
            for (b, &z) in row.iter().enumerate() {
                let lp = z - m - lse;
                let prob = lp.exp();
                grad[base + b] = -prob * (lp + h) / count;
            }
        }
    }
    (total / count, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, points: usize, bins: usize) -> NocsMap {
        let logits: Vec<f64> = (0..points * 3 * bins)
            .map(|_| rng.random::<f64>() * 8.0 - 4.0)
            .collect();
        NocsMap::from_logits(points, bins, logits).unwrap()
    }

    #[test]
    fn encode_covers_edge_cases() {
        let t = encode_bins(
            &[
                Vector3::new(0.0, 0.5, 1.0),
                Vector3::new(-0.2, 0.031, 1.7),
            ],
            32,
        );
        assert_eq!(t.index(0, 0), 0);
        assert_eq!(t.index(0, 1), 16);
        assert_eq!(t.index(0, 2), 31);
        // Out-of-range coordinates clamp instead of wrapping.
        assert_eq!(t.index(1, 0), 0);
        assert_eq!(t.index(1, 1), 0);
        assert_eq!(t.index(1, 2), 31);
    }

    #[test]
    fn encode_decode_round_trip_within_half_bin() {
        let bins = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..500 {
            let c = Vector3::new(rng.random(), rng.random(), rng.random());
            let t = encode_bins(&[c], bins);
            // Build a map whose argmax is exactly the encoded bin.
            let mut logits = vec![0.0; 3 * bins];
            for axis in 0..3 {
                logits[axis * bins + t.index(0, axis)] = 1.0;
            }
            let map = NocsMap::from_logits(1, bins, logits).unwrap();
            let back = decode_bins(&map)[0];
            for axis in 0..3 {
                assert!((back[axis] - c[axis]).abs() <= 0.5 / bins as f64 + 1e-12);
            }
        }
    }

    #[test]
    fn argmax_ties_take_lower_index() {
        let bins = 4;
        let logits = vec![2.0, 2.0, 1.0, 2.0, 0.0, 3.0, 3.0, 1.0, -1.0, -1.0, -1.0, -1.0];
        let map = NocsMap::from_logits(1, bins, logits).unwrap();
        let t = argmax_bins(&map);
        assert_eq!(t.index(0, 0), 0);
        assert_eq!(t.index(0, 1), 1);
        assert_eq!(t.index(0, 2), 0);
    }

    #[test]
    fn softmax_is_stable_and_normalised() {
        let p = softmax(&[1000.0, 0.0, -1000.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[0] - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let row: Vec<f64> = (0..16).map(|_| rng.random::<f64>() * 100.0 - 50.0).collect();
            let p = softmax(&row);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn uniform_logits_give_log_b_entropy() {
        for bins in [2usize, 8, 32] {
            let map = NocsMap::from_logits(3, bins, vec![0.7; 3 * 3 * bins]).unwrap();
            let h = entropy(&map);
            assert!((h - (bins as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_logits_give_near_zero_entropy() {
        let bins = 8;
        let mut logits = vec![0.0; 3 * bins];
        for axis in 0..3 {
            logits[axis * bins + 2] = 60.0;
        }
        let map = NocsMap::from_logits(1, bins, logits).unwrap();
        assert!(entropy(&map) < 1e-12);
    }

    #[test]
    fn cross_entropy_of_uniform_is_log_b() {
        let bins = 32;
        let map = NocsMap::from_logits(5, bins, vec![0.0; 5 * 3 * bins]).unwrap();
        let target = encode_bins(&vec![Vector3::new(0.1, 0.5, 0.9); 5], bins);
        let (loss, _) = cross_entropy(&map, &target, None).unwrap();
        assert!((loss - (bins as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let points = 3;
            let bins = 6;
            let map = random_map(&mut rng, points, bins);
            let coords: Vec<Vector3<f64>> = (0..points)
                .map(|_| Vector3::new(rng.random(), rng.random(), rng.random()))
                .collect();
            let target = encode_bins(&coords, bins);
            let (_, grad) = cross_entropy(&map, &target, None).unwrap();
            let h = 1e-6;
            for k in 0..map.logits().len() {
                let mut lo = map.logits().to_vec();
                let mut hi = lo.clone();
                lo[k] -= h;
                hi[k] += h;
                let (l_lo, _) = cross_entropy(
                    &NocsMap::from_logits(points, bins, lo).unwrap(),
                    &target,
                    None,
                )
                .unwrap();
                let (l_hi, _) = cross_entropy(
                    &NocsMap::from_logits(points, bins, hi).unwrap(),
                    &target,
                    None,
                )
                .unwrap();
                let fd = (l_hi - l_lo) / (2.0 * h);
                assert!(
                    (grad[k] - fd).abs() <= 1e-7 * (1.0 + fd.abs()),
                    "logit {k}: analytic {} vs fd {fd}",
                    grad[k]
                );
            }
        }
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let points = 2;
            let bins = 5;
            let map = random_map(&mut rng, points, bins);
            let (_, grad) = entropy_with_grad(&map);
            let h = 1e-6;
            for k in 0..map.logits().len() {
                let mut lo = map.logits().to_vec();
                let mut hi = lo.clone();
                lo[k] -= h;
                hi[k] += h;
                let e_lo = entropy(&NocsMap::from_logits(points, bins, lo).unwrap());
                let e_hi = entropy(&NocsMap::from_logits(points, bins, hi).unwrap());
                let fd = (e_hi - e_lo) / (2.0 * h);
                assert!(
                    (grad[k] - fd).abs() <= 1e-7 * (1.0 + fd.abs()),
                    "logit {k}: analytic {} vs fd {fd}",
                    grad[k]
                );
            }
        }
    }

    #[test]
    fn masked_cross_entropy_uses_only_selected_points() {
        let bins = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let map = random_map(&mut rng, 6, bins);
        let coords: Vec<Vector3<f64>> = (0..6)
            .map(|_| Vector3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let target = encode_bins(&coords, bins);
        let mask = vec![true, false, true, false, false, true];

        let (masked_loss, masked_grad) = cross_entropy(&map, &target, Some(&mask)).unwrap();

        // Oracle: rebuild a smaller problem from the selected rows only.
        let rows: Vec<usize> = vec![0, 2, 5];
        let mut sel_logits = Vec::new();
        for &r in &rows {
            for axis in 0..3 {
                sel_logits.extend_from_slice(map.row(r, axis));
            }
        }
        let sel_map = NocsMap::from_logits(3, bins, sel_logits).unwrap();
        let sel_target = target.select(&rows);
        let (oracle_loss, _) = cross_entropy(&sel_map, &sel_target, None).unwrap();
        assert!((masked_loss - oracle_loss).abs() < 1e-12);

        // Gradient must vanish on masked-out points.
        for p in [1usize, 3, 4] {
            for axis in 0..3 {
                let base = (p * 3 + axis) * bins;
                for b in 0..bins {
                    assert_eq!(masked_grad[base + b], 0.0);
                }
            }
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let bins = 4;
        let map = NocsMap::from_logits(2, bins, vec![0.0; 2 * 3 * bins]).unwrap();
        let target = encode_bins(&[Vector3::zeros(), Vector3::zeros()], bins);
        let err = cross_entropy(&map, &target, Some(&[false, false]));
        assert!(matches!(err, Err(Error::EmptyMask)));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let map = NocsMap::from_logits(2, 4, vec![0.0; 2 * 3 * 4]).unwrap();
        let target = encode_bins(&[Vector3::zeros()], 4);
        assert!(matches!(cross_entropy(&map, &target, None), Err(Error::ShapeMismatch(_))));
        let target_b = encode_bins(&[Vector3::zeros(), Vector3::zeros()], 8);
        assert!(matches!(cross_entropy(&map, &target_b, None), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let bins = 4;
        let logits = vec![700.0, -700.0, 0.0, 699.0, 0.0, 0.0, 0.0, 0.0, -1.0, -2.0, -3.0, -4.0];
        let map = NocsMap::from_logits(1, bins, logits).unwrap();
        let target = encode_bins(&[Vector3::new(0.9, 0.1, 0.5)], bins);
        let (loss, grad) = cross_entropy(&map, &target, None).unwrap();
        assert!(loss.is_finite());
        assert!(grad.iter().all(|g| g.is_finite()));
        let (h, hg) = entropy_with_grad(&map);
        assert!(h.is_finite() && h >= 0.0);
        assert!(hg.iter().all(|g| g.is_finite()));
    }
}
