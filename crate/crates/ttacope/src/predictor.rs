//! Trainable per-point coordinate predictor.
//!
//! A small fully-connected network maps per-point features to binned
//! coordinate logits. It stands in for a full perception backbone so the
//! adaptation machinery has real parameters, real gradients and a real
//! optimizer to work against, at a scale where everything runs on a desktop.
//!
//! The first layer is an affine feature normalization (one scale and one
//! shift per input feature). Those are the only parameters entropy-based
//! adaptation is allowed to touch, mirroring how norm-layer adaptation is
//! restricted in practice.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::Error;
use crate::geometry::ObservedCloud;
use crate::nocs::NocsMap;

/// Input feature width: centered/RMS-scaled coordinates plus raw coordinates.
pub const FEATURE_WIDTH: usize = 18;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One dense layer; `weight` is `fan_in × fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: DMatrix::zeros(fan_in, fan_out),
            bias: DVector::zeros(fan_out),
        }
    }
}

/// All trainable parameters of the predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub norm_scale: DVector<f64>,
    pub norm_shift: DVector<f64>,
    pub layers: Vec<Layer>,
}

impl ModelParams {
    /// Fresh network: `FEATURE_WIDTH → hidden… → 3·bins`, Xavier-uniform
    /// weights, zero biases, identity normalization. Deterministic in `seed`.
    pub fn init(hidden: &[usize], bins: usize, seed: u64) -> Self {
        assert!(bins >= 2, "need at least 2 bins per axis");
        assert!(!hidden.is_empty(), "need at least one hidden layer");
        let mut dims = vec![FEATURE_WIDTH];
        dims.extend_from_slice(hidden);
        dims.push(3 * bins);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut layer = Layer::zeros(fan_in, fan_out);
            for i in 0..fan_in {
                for o in 0..fan_out {
                    layer.weight[(i, o)] = rng.random::<f64>() * 2.0 * limit - limit;
                }
            }
            layers.push(layer);
        }
        Self {
            norm_scale: DVector::from_element(FEATURE_WIDTH, 1.0),
            norm_shift: DVector::zeros(FEATURE_WIDTH),
            layers,
        }
    }

    /// Layer widths, input first: `[FEATURE_WIDTH, hidden…, 3·bins]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.norm_scale.len()];
        for l in &self.layers {
            d.push(l.weight.ncols());
        }
        d
    }

    pub fn bins(&self) -> usize {
        self.layers.last().expect("no layers").weight.ncols() / 3
    }

    pub fn parameter_count(&self) -> usize {
        self.norm_scale.len()
            + self.norm_shift.len()
            + self
                .layers
                .iter()
                .map(|l| l.weight.len() + l.bias.len())
                .sum::<usize>()
    }
}

/// Gradient (or moment) buffers with the same shapes as [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub norm_scale: DVector<f64>,
    pub norm_shift: DVector<f64>,
    pub layers: Vec<Layer>,
}

impl ModelGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            norm_scale: DVector::zeros(params.norm_scale.len()),
            norm_shift: DVector::zeros(params.norm_shift.len()),
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    /// `self += other`, block by block.
    pub fn add_assign(&mut self, other: &ModelGrads) {
        self.norm_scale += &other.norm_scale;
        self.norm_shift += &other.norm_shift;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }
}

/// Per-point features built from the cloud's own statistics, so a pointwise
/// model still sees enough context to resolve canonical coordinates:
///
/// - coordinates centered on the centroid and scaled by the RMS radius,
/// - the raw camera-frame coordinates,
/// - a cloud-wide shape signature (scatter eigenvalues over the squared RMS
///   radius) repeated on every row, which is what lets the model tell shape
///   families apart,
/// - the two leading scatter axes in camera coordinates, which carry the
///   cloud's orientation,
/// - the centered point expressed in the scatter eigenbasis, which is nearly
///   pose-invariant and anchors each point within the shape.
pub fn point_features(cloud: &ObservedCloud) -> DMatrix<f64> {
    let pts = cloud.points();
    let n = pts.len();
    let mut centroid = nalgebra::Vector3::zeros();
    for p in pts {
        centroid += p;
    }
    centroid /= n as f64;
    let mut ms = 0.0;
    for p in pts {
        ms += (p - centroid).norm_squared();
    }
    let rms = (ms / n as f64).sqrt().max(1e-12);
    let frame = crate::geometry::scatter_frame(pts);

    let mut f = DMatrix::zeros(n, FEATURE_WIDTH);
    for (r, p) in pts.iter().enumerate() {
        let c = (p - centroid) / rms;
        f[(r, 0)] = c.x;
        f[(r, 1)] = c.y;
        f[(r, 2)] = c.z;
        f[(r, 3)] = p.x;
        f[(r, 4)] = p.y;
        f[(r, 5)] = p.z;
        for k in 0..3 {
            f[(r, 6 + k)] = frame[k].0 / (rms * rms);
        }
        for k in 0..3 {
            f[(r, 9 + k)] = frame[0].1[k];
            f[(r, 12 + k)] = frame[1].1[k];
        }
        for k in 0..3 {
            f[(r, 15 + k)] = frame[k].1.dot(&c);
        }
    }
    f
}

fn check_features(params: &ModelParams, features: &DMatrix<f64>) -> Result<(), Error> {
    if features.ncols() != params.norm_scale.len() {
        return Err(Error::ShapeMismatch(format!(
            "feature width {} vs model input {}",
            features.ncols(),
            params.norm_scale.len()
        )));
    }
    if features.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Runs the network over all rows of `features` and returns binned logits.
pub fn forward(params: &ModelParams, features: &DMatrix<f64>) -> Result<NocsMap, Error> {
    let acts = forward_activations(params, features)?;
    let z = acts.last().expect("no output");
    let (rows, cols) = z.shape();
    let mut logits = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            logits.push(z[(r, c)]);
        }
    }
    NocsMap::from_logits(rows, params.bins(), logits)
}

/// All layer outputs, input normalization first, final linear logits last.
/// Hidden layers use tanh.
fn forward_activations(
    params: &ModelParams,
    features: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>, Error> {
    check_features(params, features)?;
    let n = features.nrows();
    let width = features.ncols();
    let mut a = DMatrix::zeros(n, width);
    for r in 0..n {
        for c in 0..width {
            a[(r, c)] = features[(r, c)] * params.norm_scale[c] + params.norm_shift[c];
        }
    }
    let last = params.layers.len() - 1;
    let mut acts = Vec::with_capacity(params.layers.len() + 1);
    acts.push(a);
    for (li, layer) in params.layers.iter().enumerate() {
        let prev = acts.last().unwrap();
        let mut z = prev * &layer.weight;
        for r in 0..z.nrows() {
            for c in 0..z.ncols() {
                z[(r, c)] += layer.bias[c];
            }
        }
        if li != last {
            z.apply(|v| *v = v.tanh());
        }
        acts.push(z);
    }
    Ok(acts)
}

/// Exact reverse-mode gradients of `Σ upstream ⊙ logits` through the whole
/// network. `upstream` uses the [`NocsMap`] logit layout for the same
/// `features`.
pub fn backward(
    params: &ModelParams,
    features: &DMatrix<f64>,
    upstream: &[f64],
) -> Result<ModelGrads, Error> {
    let acts = forward_activations(params, features)?;
    let n = features.nrows();
    let out = params.layers.last().expect("no layers").weight.ncols();
    if upstream.len() != n * out {
        return Err(Error::ShapeMismatch(format!(
            "upstream length {} vs {} points x {} logits",
            upstream.len(),
            n,
            out
        )));
    }

    let mut grads = ModelGrads::zeros_like(params);
    let mut d_z = DMatrix::from_row_slice(n, out, upstream);
    let last = params.layers.len() - 1;
    for li in (0..params.layers.len()).rev() {
        // acts[li] feeds layer li, acts[li + 1] is its (activated) output.
        if li != last {
            let a = &acts[li + 1];
            for r in 0..n {
                for c in 0..a.ncols() {
                    d_z[(r, c)] *= 1.0 - a[(r, c)] * a[(r, c)];
                }
            }
        }
        grads.layers[li].weight = acts[li].transpose() * &d_z;
        for c in 0..d_z.ncols() {
            grads.layers[li].bias[c] = d_z.column(c).sum();
        }
        d_z = &d_z * params.layers[li].weight.transpose();
    }
    // d_z now holds the gradient at the normalization output.
    for c in 0..features.ncols() {
        let mut gs = 0.0;
        let mut gb = 0.0;
        for r in 0..n {
            gs += d_z[(r, c)] * features[(r, c)];
            gb += d_z[(r, c)];
        }
        grads.norm_scale[c] = gs;
        grads.norm_shift[c] = gb;
    }
    Ok(grads)
}

/// Adam moment buffers plus step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: ModelGrads,
    v: ModelGrads,
    pub step: u64,
    pub learning_rate: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        Self {
            m: ModelGrads::zeros_like(params),
            v: ModelGrads::zeros_like(params),
            step: 0,
            learning_rate,
        }
    }
}

/// Which parameter blocks an optimizer step may touch.
#[derive(Clone, Debug)]
pub struct ParameterMask {
    pub norm: bool,
    pub layers: Vec<bool>,
}

impl ParameterMask {
    pub fn all(params: &ModelParams) -> Self {
        Self { norm: true, layers: vec![true; params.layers.len()] }
    }
}

/// Mask selecting only the normalization parameters, for entropy-style
/// adaptation that must leave the network weights untouched.
pub fn tent_parameter_mask(params: &ModelParams) -> ParameterMask {
    ParameterMask { norm: true, layers: vec![false; params.layers.len()] }
}

fn adam_block(data: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, c1: f64, c2: f64) {
    for i in 0..data.len() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// One Adam update over every parameter block.
pub fn adam_step(params: &mut ModelParams, grads: &ModelGrads, state: &mut OptimizerState) {
    let mask = ParameterMask::all(params);
    adam_step_masked(params, grads, state, &mask);
}

/// Adam update restricted to masked-in blocks. Skipped blocks keep both their
/// parameters and their moment buffers bit-identical.
pub fn adam_step_masked(
    params: &mut ModelParams,
    grads: &ModelGrads,
    state: &mut OptimizerState,
    mask: &ParameterMask,
) {
    assert_eq!(params.layers.len(), grads.layers.len(), "grads shape mismatch");
    assert_eq!(params.layers.len(), mask.layers.len(), "mask length mismatch");
    state.step += 1;
    let c1 = 1.0 - BETA1.powi(state.step as i32);
    let c2 = 1.0 - BETA2.powi(state.step as i32);
    let lr = state.learning_rate;
    if mask.norm {
        adam_block(
            params.norm_scale.as_mut_slice(),
            grads.norm_scale.as_slice(),
            state.m.norm_scale.as_mut_slice(),
            state.v.norm_scale.as_mut_slice(),
            lr,
            c1,
            c2,
        );
        adam_block(
            params.norm_shift.as_mut_slice(),
            grads.norm_shift.as_slice(),
            state.m.norm_shift.as_mut_slice(),
            state.v.norm_shift.as_mut_slice(),
            lr,
            c1,
            c2,
        );
    }
    for li in 0..params.layers.len() {
        if !mask.layers[li] {
            continue;
        }
        adam_block(
            params.layers[li].weight.as_mut_slice(),
            grads.layers[li].weight.as_slice(),
            state.m.layers[li].weight.as_mut_slice(),
            state.v.layers[li].weight.as_mut_slice(),
            lr,
            c1,
            c2,
        );
        adam_block(
            params.layers[li].bias.as_mut_slice(),
            grads.layers[li].bias.as_slice(),
            state.m.layers[li].bias.as_mut_slice(),
            state.v.layers[li].bias.as_mut_slice(),
            lr,
            c1,
            c2,
        );
    }
}

/// Exponential moving average: `teacher ← γ·teacher + (1-γ)·student`.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, gamma: f64) -> Result<(), Error> {
    if teacher.dims() != student.dims() {
        return Err(Error::ShapeMismatch(format!(
            "teacher dims {:?} vs student dims {:?}",
            teacher.dims(),
            student.dims()
        )));
    }
    let blend = |t: &mut [f64], s: &[f64]| {
        for i in 0..t.len() {
            t[i] = gamma * t[i] + (1.0 - gamma) * s[i];
        }
    };
    blend(teacher.norm_scale.as_mut_slice(), student.norm_scale.as_slice());
    blend(teacher.norm_shift.as_mut_slice(), student.norm_shift.as_slice());
    for (t, s) in teacher.layers.iter_mut().zip(&student.layers) {
        blend(t.weight.as_mut_slice(), s.weight.as_slice());
        blend(t.bias.as_mut_slice(), s.bias.as_slice());
    }
    Ok(())
}

/// Writes parameters as a shape header (layer widths as little-endian u32)
/// followed by a flat little-endian f64 array: norm scale, norm shift, then
/// each layer's weight (input-major) and bias.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), Error> {
    let mut w = BufWriter::new(File::create(path)?);
    let dims = params.dims();
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in &dims {
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    let mut put = |v: f64| w.write_all(&v.to_le_bytes());
    for &v in params.norm_scale.iter() {
        put(v)?;
    }
    for &v in params.norm_shift.iter() {
        put(v)?;
    }
    for layer in &params.layers {
        for i in 0..layer.weight.nrows() {
            for o in 0..layer.weight.ncols() {
                put(layer.weight[(i, o)])?;
            }
        }
        for &v in layer.bias.iter() {
            put(v)?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, Error> {
    let mut r = BufReader::new(File::open(path)?);
    let mut u32_buf = [0u8; 4];
    r.read_exact(&mut u32_buf)
        .map_err(|_| Error::InvalidCheckpoint("truncated header".into()))?;
    let n_dims = u32::from_le_bytes(u32_buf) as usize;
    if !(2..=64).contains(&n_dims) {
        return Err(Error::InvalidCheckpoint(format!("implausible dim count {n_dims}")));
    }
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        r.read_exact(&mut u32_buf)
            .map_err(|_| Error::InvalidCheckpoint("truncated header".into()))?;
        dims.push(u32::from_le_bytes(u32_buf) as usize);
    }
    if dims.iter().any(|&d| d == 0) || dims.last().map_or(true, |&d| d % 3 != 0) {
        return Err(Error::InvalidCheckpoint(format!("bad layer widths {dims:?}")));
    }

    let mut f64_buf = [0u8; 8];
    let mut next = |r: &mut BufReader<File>| -> Result<f64, Error> {
        r.read_exact(&mut f64_buf)
            .map_err(|_| Error::InvalidCheckpoint("truncated data".into()))?;
        let v = f64::from_le_bytes(f64_buf);
        if !v.is_finite() {
            return Err(Error::InvalidCheckpoint("non-finite parameter".into()));
        }
        Ok(v)
    };

    let width = dims[0];
    let mut norm_scale = DVector::zeros(width);
    let mut norm_shift = DVector::zeros(width);
    for i in 0..width {
        norm_scale[i] = next(&mut r)?;
    }
    for i in 0..width {
        norm_shift[i] = next(&mut r)?;
    }
    let mut layers = Vec::with_capacity(n_dims - 1);
    for w in dims.windows(2) {
        let mut layer = Layer::zeros(w[0], w[1]);
        for i in 0..w[0] {
            for o in 0..w[1] {
                layer.weight[(i, o)] = next(&mut r)?;
            }
        }
        for o in 0..w[1] {
            layer.bias[o] = next(&mut r)?;
        }
        layers.push(layer);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::InvalidCheckpoint("trailing bytes".into()));
    }
    Ok(ModelParams { norm_scale, norm_shift, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nocs;
    use nalgebra::Vector3;
    use rand::Rng;

    fn fixed_cloud(n: usize) -> ObservedCloud {
        let pts: Vec<Vector3<f64>> = (0..n)
            .map(|i| {
                let t = i as f64;
                Vector3::new(
                    0.1 * (t * 0.7).sin(),
                    0.1 * (t * 1.3).cos(),
                    0.8 + 0.05 * (t * 0.4).sin(),
                )
            })
            .collect();
        ObservedCloud::new(pts).unwrap()
    }

    fn tiny_model(seed: u64) -> ModelParams {
        ModelParams::init(&[8, 8], 6, seed)
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(&[64, 64], 32, 7);
        let b = ModelParams::init(&[64, 64], 32, 7);
        assert_eq!(a, b);
        let c = ModelParams::init(&[64, 64], 32, 8);
        assert_ne!(a, c);
        assert_eq!(a.dims(), vec![18, 64, 64, 96]);
        assert_eq!(a.bins(), 32);
    }

    #[test]
    fn forward_shape_and_layout() {
        let model = tiny_model(1);
        let cloud = fixed_cloud(5);
        let map = forward(&model, &point_features(&cloud)).unwrap();
        assert_eq!(map.points(), 5);
        assert_eq!(map.bins(), 6);
        assert_eq!(map.logits().len(), 5 * 3 * 6);
    }

    #[test]
    fn forward_rejects_wrong_feature_width() {
        let model = tiny_model(1);
        let bad = DMatrix::zeros(4, 5);
        assert!(matches!(forward(&model, &bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn features_are_translation_sensitive_but_normalised() {
        let cloud = fixed_cloud(16);
        let f = point_features(&cloud);
        // Centered block has zero mean and unit RMS radius.
        for c in 0..3 {
            let mean: f64 = (0..16).map(|r| f[(r, c)]).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
        }
        let ms: f64 = (0..16)
            .map(|r| f[(r, 0)].powi(2) + f[(r, 1)].powi(2) + f[(r, 2)].powi(2))
            .sum::<f64>()
            / 16.0;
        assert!((ms - 1.0).abs() < 1e-12);
        // Raw block carries the absolute position.
        assert_eq!(f[(3, 3)], cloud.points()[3].x);
    }

    /// Mutable access to the idx-th parameter under a fixed flat ordering.
    /// Test helper only; the same walk reads the matching gradient entry.
    fn param_mut(model: &mut ModelParams, idx: usize) -> &mut f64 {
        let w = model.norm_scale.len();
        if idx < w {
            return &mut model.norm_scale[idx];
        }
        let mut i = idx - w;
        if i < w {
            return &mut model.norm_shift[i];
        }
        i -= w;
        for l in &mut model.layers {
            if i < l.weight.len() {
                return &mut l.weight.as_mut_slice()[i];
            }
            i -= l.weight.len();
            if i < l.bias.len() {
                return &mut l.bias.as_mut_slice()[i];
            }
            i -= l.bias.len();
        }
        panic!("parameter index {idx} out of range");
    }

    fn grad_at(grads: &ModelGrads, idx: usize) -> f64 {
        let w = grads.norm_scale.len();
        if idx < w {
            return grads.norm_scale[idx];
        }
        let mut i = idx - w;
        if i < w {
            return grads.norm_shift[i];
        }
        i -= w;
        for l in &grads.layers {
            if i < l.weight.len() {
                return l.weight.as_slice()[i];
            }
            i -= l.weight.len();
            if i < l.bias.len() {
                return l.bias.as_slice()[i];
            }
            i -= l.bias.len();
        }
        panic!("gradient index {idx} out of range");
    }

    #[test]
    fn backward_matches_finite_differences_on_all_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for trial in 0..5 {
            let mut model = tiny_model(100 + trial);
            let cloud = fixed_cloud(4);
            let feats = point_features(&cloud);
            let coords: Vec<Vector3<f64>> = (0..4)
                .map(|_| Vector3::new(rng.random(), rng.random(), rng.random()))
                .collect();
            let target = nocs::encode_bins(&coords, model.bins());

            let map = forward(&model, &feats).unwrap();
            let (_, up) = nocs::cross_entropy(&map, &target, None).unwrap();
            let grads = backward(&model, &feats, &up).unwrap();

            let h = 1e-5;
            let count = model.parameter_count();
            for idx in 0..count {
                let orig = *param_mut(&mut model, idx);
                *param_mut(&mut model, idx) = orig + h;
                let map_hi = forward(&model, &feats).unwrap();
                let hi = nocs::cross_entropy(&map_hi, &target, None).unwrap().0;
                *param_mut(&mut model, idx) = orig - h;
                let map_lo = forward(&model, &feats).unwrap();
                let lo = nocs::cross_entropy(&map_lo, &target, None).unwrap().0;
                *param_mut(&mut model, idx) = orig;

                let fd = (hi - lo) / (2.0 * h);
                let analytic = grad_at(&grads, idx);
                let denom = fd.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    (analytic - fd).abs() / denom < 1e-4,
                    "param {idx}: analytic {analytic} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn adam_decreases_a_simple_loss() {
        let mut model = tiny_model(3);
        let cloud = fixed_cloud(32);
        let feats = point_features(&cloud);
        let coords: Vec<Vector3<f64>> = (0..32)
            .map(|i| Vector3::new(i as f64 / 32.0, 0.5, 1.0 - i as f64 / 32.0))
            .collect();
        let target = nocs::encode_bins(&coords, model.bins());
        let mut opt = OptimizerState::new(&model, 1e-2);
        let mut losses = Vec::new();
        for _ in 0..200 {
            let map = forward(&model, &feats).unwrap();
            let (l, up) = nocs::cross_entropy(&map, &target, None).unwrap();
            losses.push(l);
            let g = backward(&model, &feats, &up).unwrap();
            adam_step(&mut model, &g, &mut opt);
        }
        assert!(losses.last().unwrap() < &(losses[0] * 0.2), "{losses:?}");
    }

    #[test]
    fn masked_adam_touches_only_norm_block() {
        let mut model = tiny_model(4);
        let frozen = model.clone();
        let cloud = fixed_cloud(8);
        let feats = point_features(&cloud);
        let map = forward(&model, &feats).unwrap();
        let (_, up) = crate::nocs::entropy_with_grad(&map);
        let grads = backward(&model, &feats, &up).unwrap();
        let mut opt = OptimizerState::new(&model, 1e-3);
        let mask = tent_parameter_mask(&model);
        adam_step_masked(&mut model, &grads, &mut opt, &mask);

        assert_ne!(model.norm_scale, frozen.norm_scale);
        for (a, b) in model.layers.iter().zip(&frozen.layers) {
            assert_eq!(a.weight, b.weight, "layer weights must stay bit-identical");
            assert_eq!(a.bias, b.bias);
        }
    }

    #[test]
    fn adam_with_zero_gradient_is_a_no_op_on_parameters() {
        let mut model = tiny_model(5);
        let frozen = model.clone();
        let zeros = ModelGrads::zeros_like(&model);
        let mut opt = OptimizerState::new(&model, 1e-2);
        for _ in 0..5 {
            adam_step(&mut model, &zeros, &mut opt);
        }
        assert_eq!(model, frozen);
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn ema_endpoints_and_midpoint() {
        let student = tiny_model(6);
        let teacher0 = tiny_model(7);

        let mut t = teacher0.clone();
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t, teacher0);

        let mut t = teacher0.clone();
        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t, student);

        let mut t = teacher0.clone();
        ema_update(&mut t, &student, 0.5).unwrap();
        let expect = 0.5 * teacher0.layers[0].weight[(2, 3)] + 0.5 * student.layers[0].weight[(2, 3)];
        assert!((t.layers[0].weight[(2, 3)] - expect).abs() < 1e-15);
    }

    #[test]
    fn ema_rejects_mismatched_shapes() {
        let student = tiny_model(8);
        let mut teacher = ModelParams::init(&[4, 4], 6, 8);
        assert!(matches!(
            ema_update(&mut teacher, &student, 0.9),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn repeated_ema_converges_to_student() {
        let student = tiny_model(9);
        let mut teacher = tiny_model(10);
        for _ in 0..2000 {
            ema_update(&mut teacher, &student, 0.99).unwrap();
        }
        let d = (&teacher.layers[1].weight - &student.layers[1].weight).abs().max();
        assert!(d < 1e-7, "residual {d}");
    }

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = ModelParams::init(&[64, 64], 32, 11);
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn checkpoint_rejects_truncation_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model(12);
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(Error::InvalidCheckpoint(_))));

        let pad = dir.path().join("pad.ckpt");
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0u8; 8]);
        std::fs::write(&pad, &longer).unwrap();
        assert!(matches!(load_checkpoint(&pad), Err(Error::InvalidCheckpoint(_))));

        let junk = dir.path().join("junk.ckpt");
        std::fs::write(&junk, b"nc").unwrap();
        assert!(matches!(load_checkpoint(&junk), Err(Error::InvalidCheckpoint(_))));
    }

    #[test]
    fn forward_snapshot_is_stable() {
        // Regression pin: frozen checksum of the logits for a fixed model and
        // input. Catches accidental changes to init, layout or math.
        let model = ModelParams::init(&[64, 64], 32, 42);
        let map = forward(&model, &point_features(&fixed_cloud(8))).unwrap();
        let sum: f64 = map.logits().iter().sum();
        let abs: f64 = map.logits().iter().map(|v| v.abs()).sum();
        assert!((sum - FORWARD_SNAPSHOT_SUM).abs() < 1e-9, "sum drifted to {sum:.15}");
        assert!((abs - FORWARD_SNAPSHOT_ABS).abs() < 1e-9, "abs drifted to {abs:.15}");
    }

    const FORWARD_SNAPSHOT_SUM: f64 = -35.072_577_252_905_055_9;
    const FORWARD_SNAPSHOT_ABS: f64 = 172.518_636_045_597_617;
}
