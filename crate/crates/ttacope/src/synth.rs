//! Synthetic object instances and depth-like observation streams.
//!
//! Instances are sampled from four parametric shape families at desk scale.
//! A frame renders one instance under a camera-facing pose with a controllable
//! observation domain: hidden-hemisphere culling to a partial view, Gaussian
//! noise, random dropout and a depth-direction bias. Source and target
//! streams differ only in their domain parameters, which is exactly the gap
//! adaptation is supposed to close.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::Error;
use crate::geometry::{ObservedCloud, SimilarityTransform};
use crate::nocs::{encode_bins, NocsTarget};
use crate::seeds;

/// Points sampled on each instance's surface before per-frame subsampling.
pub const INSTANCE_SURFACE_SAMPLES: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Box,
    Cylinder,
    TaperedCylinder,
    OpenBox,
}

impl ShapeFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeFamily::Box => "box",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::TaperedCylinder => "tapered-cylinder",
            ShapeFamily::OpenBox => "open-box",
        }
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "box" => Ok(ShapeFamily::Box),
            "cylinder" => Ok(ShapeFamily::Cylinder),
            "tapered-cylinder" => Ok(ShapeFamily::TaperedCylinder),
            "open-box" => Ok(ShapeFamily::OpenBox),
            other => Err(Error::UnknownMethod(format!("shape family `{other}`"))),
        }
    }
}

/// Rotational symmetry of a category, used by the evaluation metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Symmetry {
    None,
    /// Rotations about the given canonical axis (0 = x, 1 = y, 2 = z) leave
    /// the shape unchanged.
    Axial(usize),
}

#[derive(Clone, Debug)]
pub struct CategorySpec {
    pub name: String,
    pub family: ShapeFamily,
    /// Canonical proportions of the shape's bounding box. Instances differ
    /// only by the overall scale, never in aspect; together with the bounded
    /// stream tilt this keeps the per-point coordinate map well defined.
    pub aspect: Vector3<f64>,
    /// Sampling range for the overall scale that multiplies `aspect`, meters.
    pub scale_range: (f64, f64),
    pub symmetry: Symmetry,
}

/// The built-in desk-scale catalog.
pub fn default_categories() -> Vec<CategorySpec> {
    vec![
        CategorySpec {
            name: "box".into(),
            family: ShapeFamily::Box,
            aspect: Vector3::new(1.0, 0.75, 0.5),
            scale_range: (0.12, 0.28),
            symmetry: Symmetry::None,
        },
        CategorySpec {
            name: "can".into(),
            family: ShapeFamily::Cylinder,
            aspect: Vector3::new(0.66, 1.0, 0.66),
            scale_range: (0.08, 0.20),
            symmetry: Symmetry::Axial(1),
        },
        CategorySpec {
            name: "bottle".into(),
            family: ShapeFamily::TaperedCylinder,
            aspect: Vector3::new(0.55, 1.0, 0.55),
            scale_range: (0.10, 0.26),
            symmetry: Symmetry::Axial(1),
        },
        CategorySpec {
            name: "tray".into(),
            family: ShapeFamily::OpenBox,
            aspect: Vector3::new(1.0, 0.7, 0.35),
            scale_range: (0.12, 0.28),
            symmetry: Symmetry::None,
        },
    ]
}

pub fn category_by_name<'a>(catalog: &'a [CategorySpec], name: &str) -> Option<&'a CategorySpec> {
    catalog.iter().find(|c| c.name == name)
}

/// One sampled object: surface points in normalized coordinates plus the
/// metric bounding-box size.
#[derive(Clone, Debug)]
pub struct Instance {
    pub category: String,
    /// Surface samples in `[0, 1]³`, bounding-box diagonal normalized to one,
    /// center at `(0.5, 0.5, 0.5)`.
    pub nocs_points: Vec<Vector3<f64>>,
    /// Metric bounding-box extents, meters.
    pub size: Vector3<f64>,
}

struct Face {
    area: f64,
    // Maps (u, v) in the unit square to a metric surface point.
    point: Box<dyn Fn(f64, f64) -> Vector3<f64>>,
}

fn box_faces(half: Vector3<f64>, with_top: bool) -> Vec<Face> {
    let (hx, hy, hz) = (half.x, half.y, half.z);
    let mut faces: Vec<Face> = Vec::new();
    for sign in [-1.0, 1.0] {
        faces.push(Face {
            area: 4.0 * hy * hz,
            point: Box::new(move |u, v| {
                Vector3::new(sign * hx, (2.0 * u - 1.0) * hy, (2.0 * v - 1.0) * hz)
            }),
        });
        faces.push(Face {
            area: 4.0 * hx * hy,
            point: Box::new(move |u, v| {
                Vector3::new((2.0 * u - 1.0) * hx, (2.0 * v - 1.0) * hy, sign * hz)
            }),
        });
        if sign < 0.0 || with_top {
            faces.push(Face {
                area: 4.0 * hx * hz,
                point: Box::new(move |u, v| {
                    Vector3::new((2.0 * u - 1.0) * hx, sign * hy, (2.0 * v - 1.0) * hz)
                }),
            });
        }
    }
    faces
}

fn cylinder_faces(r_bottom: f64, r_top: f64, height: f64) -> Vec<Face> {
    let hy = height / 2.0;
    let slant = (height * height + (r_bottom - r_top) * (r_bottom - r_top)).sqrt();
    let mut faces = vec![Face {
        area: std::f64::consts::PI * (r_bottom + r_top) * slant,
        point: Box::new(move |u, v| {
            // v picks the height with density proportional to the local
            // radius, so lateral samples stay uniform per area.
            let (a, b) = (r_bottom, r_top);
            let t = if (b - a).abs() < 1e-12 {
                v
            } else {
                let z = (a + b) / 2.0;
                (-a + (a * a + 2.0 * (b - a) * v * z).sqrt()) / (b - a)
            };
            let radius = a + (b - a) * t;
            let theta = u * std::f64::consts::TAU;
            Vector3::new(radius * theta.cos(), t * height - hy, radius * theta.sin())
        }),
    }];
    for (r, y) in [(r_bottom, -hy), (r_top, hy)] {
        faces.push(Face {
            area: std::f64::consts::PI * r * r,
            point: Box::new(move |u, v| {
                let radius = r * v.sqrt();
                let theta = u * std::f64::consts::TAU;
                Vector3::new(radius * theta.cos(), y, radius * theta.sin())
            }),
        });
    }
    faces
}

/// Top-to-bottom radius ratio of the tapered family.
const TAPER_RATIO: f64 = 0.55;

/// Samples one instance of a category: an overall scale from the category's
/// range applied to its canonical proportions, then uniform-by-area surface
/// points.
pub fn sample_instance(spec: &CategorySpec, rng: &mut ChaCha8Rng) -> Instance {
    let (lo, hi) = spec.scale_range;
    let s = rng.random::<f64>() * (hi - lo) + lo;
    // Rotational families read diameter from aspect.x and height from
    // aspect.y; their footprint is round, so the z extent equals x.
    let (extents, faces) = match spec.family {
        ShapeFamily::Box => (s * spec.aspect, box_faces(s * spec.aspect / 2.0, true)),
        ShapeFamily::OpenBox => (s * spec.aspect, box_faces(s * spec.aspect / 2.0, false)),
        ShapeFamily::Cylinder => {
            let (d, h) = (s * spec.aspect.x, s * spec.aspect.y);
            (Vector3::new(d, h, d), cylinder_faces(d / 2.0, d / 2.0, h))
        }
        ShapeFamily::TaperedCylinder => {
            let (d, h) = (s * spec.aspect.x, s * spec.aspect.y);
            (Vector3::new(d, h, d), cylinder_faces(d / 2.0, d / 2.0 * TAPER_RATIO, h))
        }
    };

    let total: f64 = faces.iter().map(|f| f.area).sum();
    let diag = extents.norm();
    let mut nocs_points = Vec::with_capacity(INSTANCE_SURFACE_SAMPLES);
    for _ in 0..INSTANCE_SURFACE_SAMPLES {
        let mut pick = rng.random::<f64>() * total;
        let mut face = &faces[faces.len() - 1];
        for f in &faces {
            if pick < f.area {
                face = f;
                break;
            }
            pick -= f.area;
        }
        let p = (face.point)(rng.random(), rng.random());
        nocs_points.push(p / diag + Vector3::from_element(0.5));
    }
    Instance { category: spec.name.clone(), nocs_points, size: extents }
}

/// Observation-domain knobs for one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainParams {
    /// Per-coordinate Gaussian noise, meters.
    pub noise_sigma: f64,
    /// Probability of dropping each surviving point.
    pub dropout: f64,
    /// Systematic offset along the view direction, meters.
    pub bias: f64,
    /// Fraction of points kept after hidden-hemisphere culling, `(0, 1]`.
    pub partial_view: f64,
    pub rng_seed: u64,
}

impl DomainParams {
    /// Clean, full-view capture conditions.
    pub fn source() -> Self {
        Self { noise_sigma: 0.002, dropout: 0.0, bias: 0.0, partial_view: 1.0, rng_seed: 0 }
    }

    /// Shifted capture conditions: noisier, partial, sparser, depth-biased.
    pub fn target() -> Self {
        Self { noise_sigma: 0.01, dropout: 0.3, bias: 0.01, partial_view: 0.6, rng_seed: 0 }
    }
}

/// One observed frame. Ground truth rides along for evaluation and
/// pretraining; the adaptation path only ever reads `cloud`.
#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub cloud: ObservedCloud,
    pub gt_pose: Option<SimilarityTransform>,
    pub gt_nocs: Option<NocsTarget>,
    /// Metric bounding-box extents, meters.
    pub gt_size: Option<Vector3<f64>>,
    pub category: String,
}

/// Renders an instance under `pose` into a frame.
///
/// `pose` positions the metric instance; its scale multiplies the instance
/// size. The recorded ground-truth pose maps centered normalized coordinates
/// to the camera frame, so its scale is the pose scale times the instance
/// diagonal and it reproduces the noiseless observation exactly.
pub fn render_frame(
    instance: &Instance,
    pose: &SimilarityTransform,
    domain: &DomainParams,
    n_points: usize,
    bins: usize,
) -> Result<FrameRecord, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(domain.rng_seed);
    let center = Vector3::from_element(0.5);
    let diag = instance.size.norm();
    let gt_pose = SimilarityTransform {
        rotation: pose.rotation,
        translation: pose.translation,
        scale: pose.scale * diag,
    };

    let available = instance.nocs_points.len();
    let take = n_points.min(available);
    let chosen = rand::seq::index::sample(&mut rng, available, take);
    let mut nocs: Vec<Vector3<f64>> = chosen.iter().map(|i| instance.nocs_points[i]).collect();
    let mut cam: Vec<Vector3<f64>> = nocs.iter().map(|n| gt_pose.apply(&(n - center))).collect();

    let view = if pose.translation.norm() > 1e-9 {
        pose.translation.normalize()
    } else {
        Vector3::z()
    };

    // Keep the camera-facing fraction: points whose depth along the view
    // direction (relative to the object center) is smallest.
    let fraction = domain.partial_view.clamp(0.0, 1.0);
    let keep = ((fraction * take as f64).ceil() as usize).clamp(1, take);
    if keep < take {
        let mut order: Vec<usize> = (0..take).collect();
        order.sort_by(|&a, &b| {
            let da = (cam[a] - pose.translation).dot(&view);
            let db = (cam[b] - pose.translation).dot(&view);
            da.total_cmp(&db).then(a.cmp(&b))
        });
        let mut kept: Vec<usize> = order[..keep].to_vec();
        kept.sort_unstable();
        nocs = kept.iter().map(|&i| nocs[i]).collect();
        cam = kept.iter().map(|&i| cam[i]).collect();
    }

    if domain.noise_sigma > 0.0 {
        let gauss = Normal::new(0.0, domain.noise_sigma).expect("sigma must be finite");
        for p in cam.iter_mut() {
            for axis in 0..3 {
                p[axis] += gauss.sample(&mut rng);
            }
        }
    }

    if domain.dropout > 0.0 {
        let mut kept_nocs = Vec::with_capacity(cam.len());
        let mut kept_cam = Vec::with_capacity(cam.len());
        for (n, c) in nocs.iter().zip(&cam) {
            if !rng.random_bool(domain.dropout) {
                kept_nocs.push(*n);
                kept_cam.push(*c);
            }
        }
        nocs = kept_nocs;
        cam = kept_cam;
    }

    if domain.bias != 0.0 {
        for p in cam.iter_mut() {
            *p += domain.bias * view;
        }
    }

    if cam.len() < 4 {
        return Err(Error::TooFewPoints { min: 4, actual: cam.len() });
    }
    let gt_nocs = encode_bins(&nocs, bins);
    Ok(FrameRecord {
        cloud: ObservedCloud::new(cam)?,
        gt_pose: Some(gt_pose),
        gt_nocs: Some(gt_nocs),
        gt_size: Some(instance.size),
        category: instance.category.clone(),
    })
}

/// Everything needed to synthesise one stream.
#[derive(Clone, Debug)]
pub struct StreamConfig {
    pub categories: Vec<CategorySpec>,
    pub n_points: usize,
    pub bins: usize,
    /// Maximum orientation deviation from canonical, degrees. Streams keep
    /// object orientations bounded; a context-free per-point predictor has
    /// no way to resolve coordinates under unconstrained rotation.
    pub max_tilt_deg: f64,
    pub domain: DomainParams,
    pub seed: u64,
}

impl StreamConfig {
    pub fn new(domain: DomainParams, seed: u64) -> Self {
        Self {
            categories: default_categories(),
            n_points: 512,
            bins: crate::nocs::DEFAULT_BINS,
            max_tilt_deg: 20.0,
            domain,
            seed,
        }
    }
}

fn sample_view_pose(rng: &mut ChaCha8Rng, max_tilt_deg: f64) -> SimilarityTransform {
    let axis = loop {
        let v = Vector3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break Unit::new_normalize(v);
        }
    };
    let angle = rng.random::<f64>() * max_tilt_deg.to_radians();
    SimilarityTransform {
        rotation: Rotation3::from_axis_angle(&axis, angle).into_inner(),
        translation: Vector3::new(
            rng.random::<f64>() * 0.5 - 0.25,
            rng.random::<f64>() * 0.5 - 0.25,
            rng.random::<f64>() * 0.4 + 0.6,
        ),
        scale: 1.0,
    }
}

/// Synthesises `count` frames, cycling through the configured categories.
/// `stream_tag` keeps different streams on disjoint seed sequences.
pub fn make_stream(cfg: &StreamConfig, count: usize, stream_tag: u64) -> Result<Vec<FrameRecord>, Error> {
    if cfg.categories.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut frames = Vec::with_capacity(count);
    for i in 0..count {
        let spec = &cfg.categories[i % cfg.categories.len()];
        let mut inst_rng =
            ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, stream_tag * 4, i as u64));
        let instance = sample_instance(spec, &mut inst_rng);
        let mut pose_rng =
            ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, stream_tag * 4 + 1, i as u64));
        let pose = sample_view_pose(&mut pose_rng, cfg.max_tilt_deg);
        let mut domain = cfg.domain.clone();
        domain.rng_seed = seeds::derive(cfg.seed ^ cfg.domain.rng_seed, stream_tag * 4 + 2, i as u64);
        frames.push(render_frame(&instance, &pose, &domain, cfg.n_points, cfg.bins)?);
    }
    Ok(frames)
}

/// Source and target streams with disjoint randomness.
pub fn make_streams(
    source: &StreamConfig,
    target: &StreamConfig,
    counts: (usize, usize),
) -> Result<(Vec<FrameRecord>, Vec<FrameRecord>), Error> {
    Ok((make_stream(source, counts.0, 0)?, make_stream(target, counts.1, 1)?))
}

/// Category entry in a stream file: name plus symmetry, all evaluation needs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryInfo {
    pub name: String,
    pub symmetry: Symmetry,
}

impl CategoryInfo {
    pub fn from_specs(specs: &[CategorySpec]) -> Vec<CategoryInfo> {
        specs
            .iter()
            .map(|s| CategoryInfo { name: s.name.clone(), symmetry: s.symmetry })
            .collect()
    }
}

/// A stream read back from disk.
#[derive(Clone, Debug)]
pub struct StreamData {
    pub frames: Vec<FrameRecord>,
    pub bins: usize,
    pub categories: Vec<CategoryInfo>,
}

impl StreamData {
    pub fn symmetry_of(&self, category: &str) -> Symmetry {
        self.categories
            .iter()
            .find(|c| c.name == category)
            .map(|c| c.symmetry)
            .unwrap_or(Symmetry::None)
    }
}

const FLAG_POSE: u8 = 1;
const FLAG_NOCS: u8 = 2;
const FLAG_SIZE: u8 = 4;

/// Writes a stream: a header (frame count, bins, category table) followed by
/// per-frame records. Points are stored as little-endian f32 triples, bin
/// indices as u16, ground-truth poses as f64.
pub fn write_stream(
    path: &Path,
    frames: &[FrameRecord],
    bins: usize,
    categories: &[CategoryInfo],
) -> Result<(), Error> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(frames.len() as u32).to_le_bytes())?;
    w.write_all(&(bins as u32).to_le_bytes())?;
    w.write_all(&(categories.len() as u32).to_le_bytes())?;
    for c in categories {
        let name = c.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let code = match c.symmetry {
            Symmetry::None => 255u8,
            Symmetry::Axial(a) => a as u8,
        };
        w.write_all(&[code])?;
    }

    for (fi, frame) in frames.iter().enumerate() {
        let cat_index = categories
            .iter()
            .position(|c| c.name == frame.category)
            .ok_or_else(|| {
                Error::InvalidStream(format!(
                    "frame {fi} category `{}` missing from table",
                    frame.category
                ))
            })?;
        if let Some(nocs) = &frame.gt_nocs {
            if nocs.points() != frame.cloud.len() || nocs.bins() != bins {
                return Err(Error::InvalidStream(format!(
                    "frame {fi} target shape disagrees with cloud or bins"
                )));
            }
        }
        w.write_all(&(cat_index as u32).to_le_bytes())?;
        w.write_all(&(frame.cloud.len() as u32).to_le_bytes())?;
        let mut flags = 0u8;
        if frame.gt_pose.is_some() {
            flags |= FLAG_POSE;
        }
        if frame.gt_nocs.is_some() {
            flags |= FLAG_NOCS;
        }
        if frame.gt_size.is_some() {
            flags |= FLAG_SIZE;
        }
        w.write_all(&[flags])?;
        if let Some(pose) = &frame.gt_pose {
            for r in 0..3 {
                for c in 0..3 {
                    w.write_all(&pose.rotation[(r, c)].to_le_bytes())?;
                }
            }
            for i in 0..3 {
                w.write_all(&pose.translation[i].to_le_bytes())?;
            }
            w.write_all(&pose.scale.to_le_bytes())?;
        }
        if let Some(size) = &frame.gt_size {
            for i in 0..3 {
                w.write_all(&size[i].to_le_bytes())?;
            }
        }
        for p in frame.cloud.points() {
            for i in 0..3 {
                w.write_all(&(p[i] as f32).to_le_bytes())?;
            }
        }
        if let Some(nocs) = &frame.gt_nocs {
            for &idx in nocs.indices() {
                w.write_all(&(idx as u16).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_stream(path: &Path) -> Result<StreamData, Error> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |what: &str| Error::InvalidStream(what.to_string());

    fn get_u32(r: &mut impl Read) -> Result<u32, Error> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::InvalidStream("truncated".into()))?;
        Ok(u32::from_le_bytes(b))
    }
    fn get_f64(r: &mut impl Read) -> Result<f64, Error> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)
            .map_err(|_| Error::InvalidStream("truncated".into()))?;
        Ok(f64::from_le_bytes(b))
    }

    let frame_count = get_u32(&mut r)? as usize;
    let bins = get_u32(&mut r)? as usize;
    if !(2..=4096).contains(&bins) {
        return Err(bad("bin count out of range"));
    }
    let cat_count = get_u32(&mut r)? as usize;
    if cat_count == 0 || cat_count > 1024 {
        return Err(bad("implausible category count"));
    }
    let mut categories = Vec::with_capacity(cat_count);
    for _ in 0..cat_count {
        let len = get_u32(&mut r)? as usize;
        if len > 4096 {
            return Err(bad("category name too long"));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(|_| bad("truncated"))?;
        let name = String::from_utf8(buf).map_err(|_| bad("category name not utf-8"))?;
        let mut code = [0u8; 1];
        r.read_exact(&mut code).map_err(|_| bad("truncated"))?;
        let symmetry = match code[0] {
            255 => Symmetry::None,
            a @ 0..=2 => Symmetry::Axial(a as usize),
            _ => return Err(bad("bad symmetry code")),
        };
        categories.push(CategoryInfo { name, symmetry });
    }

    let mut frames = Vec::with_capacity(frame_count);
    for _ in 0..frame_count {
        let cat_index = get_u32(&mut r)? as usize;
        let category = categories
            .get(cat_index)
            .ok_or_else(|| bad("category index out of range"))?
            .name
            .clone();
        let count = get_u32(&mut r)? as usize;
        if !(4..=10_000_000).contains(&count) {
            return Err(bad("point count out of range"));
        }
        let mut flags = [0u8; 1];
        r.read_exact(&mut flags).map_err(|_| bad("truncated"))?;
        let flags = flags[0];

        let gt_pose = if flags & FLAG_POSE != 0 {
            let mut rot = nalgebra::Matrix3::zeros();
            for row in 0..3 {
                for col in 0..3 {
                    rot[(row, col)] = get_f64(&mut r)?;
                }
            }
            let translation = Vector3::new(get_f64(&mut r)?, get_f64(&mut r)?, get_f64(&mut r)?);
            let scale = get_f64(&mut r)?;
            Some(
                SimilarityTransform::new(rot, translation, scale)
                    .map_err(|_| bad("stored pose is not a similarity transform"))?,
            )
        } else {
            None
        };
        let gt_size = if flags & FLAG_SIZE != 0 {
            Some(Vector3::new(get_f64(&mut r)?, get_f64(&mut r)?, get_f64(&mut r)?))
        } else {
            None
        };
        let mut points = Vec::with_capacity(count);
        for _ in 0..count {
            let mut b = [0u8; 4];
            let mut p = Vector3::zeros();
            for i in 0..3 {
                r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
                p[i] = f32::from_le_bytes(b) as f64;
            }
            points.push(p);
        }
        let gt_nocs = if flags & FLAG_NOCS != 0 {
            let mut indices = Vec::with_capacity(count * 3);
            let mut b = [0u8; 2];
            for _ in 0..count * 3 {
                r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
                indices.push(u16::from_le_bytes(b) as usize);
            }
            Some(
                NocsTarget::from_indices(count, bins, indices)
                    .map_err(|e| Error::InvalidStream(format!("bad target: {e}")))?,
            )
        } else {
            None
        };
        frames.push(FrameRecord {
            cloud: ObservedCloud::new(points)?,
            gt_pose,
            gt_nocs,
            gt_size,
            category,
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok(StreamData { frames, bins, categories })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: ShapeFamily) -> CategorySpec {
        CategorySpec {
            name: "test".into(),
            family,
            aspect: Vector3::new(1.0, 0.8, 0.6),
            scale_range: (0.1, 0.2),
            symmetry: Symmetry::None,
        }
    }

    #[test]
    fn instances_live_in_the_unit_cube_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for family in [
            ShapeFamily::Box,
            ShapeFamily::Cylinder,
            ShapeFamily::TaperedCylinder,
            ShapeFamily::OpenBox,
        ] {
            let inst = sample_instance(&spec(family), &mut rng);
            assert_eq!(inst.nocs_points.len(), INSTANCE_SURFACE_SAMPLES);
            let diag = inst.size.norm();
            for p in &inst.nocs_points {
                for axis in 0..3 {
                    assert!(p[axis] >= 0.0 && p[axis] <= 1.0, "{family:?} out of cube: {p:?}");
                    // Within the half-extent sub-box around the center.
                    let half = inst.size[axis] / diag / 2.0;
                    assert!((p[axis] - 0.5).abs() <= half + 1e-12);
                }
            }
            // The bounding box is essentially attained on every axis.
            for axis in 0..3 {
                let lo = inst.nocs_points.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
                let hi = inst
                    .nocs_points
                    .iter()
                    .map(|p| p[axis])
                    .fold(f64::NEG_INFINITY, f64::max);
                let half = inst.size[axis] / diag / 2.0;
                assert!(hi - lo > 1.6 * half, "{family:?} axis {axis}: span {}", hi - lo);
            }
        }
    }

    #[test]
    fn box_nocs_span_matches_size_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let inst = sample_instance(&spec(ShapeFamily::Box), &mut rng);
        let diag = inst.size.norm();
        for axis in 0..3 {
            let hi = inst
                .nocs_points
                .iter()
                .map(|p| p[axis])
                .fold(f64::NEG_INFINITY, f64::max);
            let expect = 0.5 + inst.size[axis] / diag / 2.0;
            assert!((hi - expect).abs() < 0.01, "axis {axis}: {hi} vs {expect}");
        }
    }

    fn clean_domain(seed: u64) -> DomainParams {
        DomainParams { noise_sigma: 0.0, dropout: 0.0, bias: 0.0, partial_view: 1.0, rng_seed: seed }
    }

    #[test]
    fn noiseless_render_is_reproduced_by_gt_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let inst = sample_instance(&spec(ShapeFamily::Box), &mut rng);
        let mut pose_rng = ChaCha8Rng::seed_from_u64(43);
        let pose = sample_view_pose(&mut pose_rng, 20.0);
        let frame = render_frame(&inst, &pose, &clean_domain(7), 128, 32).unwrap();
        let gt = frame.gt_pose.as_ref().unwrap();
        let nocs = frame.gt_nocs.as_ref().unwrap();

        // Back-project and re-encode: noiseless points land in their bins.
        let inv = gt.inverse();
        let back: Vec<Vector3<f64>> = frame
            .cloud
            .points()
            .iter()
            .map(|p| inv.apply(p) + Vector3::from_element(0.5))
            .collect();
        for p in &back {
            for axis in 0..3 {
                assert!(p[axis] > -1e-9 && p[axis] < 1.0 + 1e-9);
            }
        }
        assert_eq!(&encode_bins(&back, 32), nocs);
        assert_eq!(gt.scale, inst.size.norm() * pose.scale);
    }

    #[test]
    fn culling_keeps_the_near_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let inst = sample_instance(&spec(ShapeFamily::Box), &mut rng);
        let pose = SimilarityTransform {
            rotation: nalgebra::Matrix3::identity(),
            translation: Vector3::new(0.0, 0.0, 0.8),
            scale: 1.0,
        };
        let mut domain = clean_domain(9);
        domain.partial_view = 0.5;
        let frame = render_frame(&inst, &pose, &domain, 400, 32).unwrap();
        assert_eq!(frame.cloud.len(), 200);
        // Every kept point sits in front of the object center.
        let max_depth = frame
            .cloud
            .points()
            .iter()
            .map(|p| p.z - 0.8)
            .fold(f64::NEG_INFINITY, f64::max);
        let full = render_frame(&inst, &pose, &clean_domain(9), 400, 32).unwrap();
        let median = {
            let mut d: Vec<f64> = full.cloud.points().iter().map(|p| p.z - 0.8).collect();
            d.sort_by(f64::total_cmp);
            d[d.len() / 2]
        };
        assert!(max_depth <= median + 1e-9, "max kept depth {max_depth} vs median {median}");
    }

    #[test]
    fn dropout_statistics_are_sane() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let inst = sample_instance(&spec(ShapeFamily::Box), &mut rng);
        let pose = sample_view_pose(&mut ChaCha8Rng::seed_from_u64(46), 15.0);
        let mut domain = clean_domain(10);
        domain.partial_view = 0.6;
        domain.dropout = 0.5;
        let frame = render_frame(&inst, &pose, &domain, 1000, 32).unwrap();
        // 600 survive culling, each kept with p = 0.5: 3 sigma ≈ 37.
        let n = frame.cloud.len() as f64;
        assert!((n - 300.0).abs() < 40.0, "kept {n}");
        assert_eq!(frame.gt_nocs.as_ref().unwrap().points(), frame.cloud.len());
    }

    #[test]
    fn bias_shifts_along_view_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let inst = sample_instance(&spec(ShapeFamily::Box), &mut rng);
        let pose = SimilarityTransform {
            rotation: nalgebra::Matrix3::identity(),
            translation: Vector3::new(0.0, 0.0, 0.9),
            scale: 1.0,
        };
        let mut biased = clean_domain(11);
        biased.bias = 0.02;
        let plain = render_frame(&inst, &pose, &clean_domain(11), 64, 32).unwrap();
        let shifted = render_frame(&inst, &pose, &biased, 64, 32).unwrap();
        for (a, b) in plain.cloud.points().iter().zip(shifted.cloud.points()) {
            let d = b - a;
            assert!((d - Vector3::new(0.0, 0.0, 0.02)).norm() < 1e-12);
        }
    }

    #[test]
    fn render_is_deterministic_in_the_domain_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let inst = sample_instance(&spec(ShapeFamily::Cylinder), &mut rng);
        let pose = sample_view_pose(&mut ChaCha8Rng::seed_from_u64(49), 20.0);
        let domain = DomainParams { rng_seed: 77, ..DomainParams::target() };
        let a = render_frame(&inst, &pose, &domain, 256, 32).unwrap();
        let b = render_frame(&inst, &pose, &domain, 256, 32).unwrap();
        assert_eq!(a.cloud.points(), b.cloud.points());
        assert_eq!(a.gt_nocs, b.gt_nocs);
        let domain2 = DomainParams { rng_seed: 78, ..domain };
        let c = render_frame(&inst, &pose, &domain2, 256, 32).unwrap();
        assert_ne!(a.cloud.points(), c.cloud.points());
    }

    #[test]
    fn streams_are_disjoint_and_deterministic() {
        let src_cfg = StreamConfig { n_points: 64, ..StreamConfig::new(DomainParams::source(), 5) };
        let tgt_cfg = StreamConfig { n_points: 64, ..StreamConfig::new(DomainParams::target(), 5) };
        let (src, tgt) = make_streams(&src_cfg, &tgt_cfg, (6, 6)).unwrap();
        assert_eq!(src.len(), 6);
        assert_eq!(tgt.len(), 6);
        for (a, b) in src.iter().zip(&tgt) {
            assert_ne!(a.cloud.points(), b.cloud.points());
        }
        let (src2, _) = make_streams(&src_cfg, &tgt_cfg, (6, 6)).unwrap();
        for (a, b) in src.iter().zip(&src2) {
            assert_eq!(a.cloud.points(), b.cloud.points());
            assert_eq!(a.gt_nocs, b.gt_nocs);
        }
        // Categories cycle.
        assert_eq!(src[0].category, "box");
        assert_eq!(src[1].category, "can");
        assert_eq!(src[5].category, "can");
    }

    #[test]
    fn stream_file_round_trips() {
        let cfg = StreamConfig { n_points: 48, ..StreamConfig::new(DomainParams::target(), 13) };
        let frames = make_stream(&cfg, 5, 1).unwrap();
        let cats = CategoryInfo::from_specs(&cfg.categories);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.stream");
        write_stream(&path, &frames, cfg.bins, &cats).unwrap();
        let back = read_stream(&path).unwrap();
        assert_eq!(back.bins, cfg.bins);
        assert_eq!(back.categories, cats);
        assert_eq!(back.frames.len(), frames.len());
        for (a, b) in frames.iter().zip(&back.frames) {
            assert_eq!(a.category, b.category);
            assert_eq!(a.gt_nocs, b.gt_nocs);
            assert_eq!(a.gt_size, b.gt_size);
            let (pa, pb) = (a.gt_pose.as_ref().unwrap(), b.gt_pose.as_ref().unwrap());
            assert_eq!(pa.rotation, pb.rotation);
            assert_eq!(pa.translation, pb.translation);
            assert_eq!(pa.scale, pb.scale);
            // Points survive the f32 round trip exactly at f32 precision.
            for (x, y) in a.cloud.points().iter().zip(b.cloud.points()) {
                for i in 0..3 {
                    assert_eq!(x[i] as f32, y[i] as f32);
                    assert_eq!(y[i], (x[i] as f32) as f64);
                }
            }
        }
    }

    #[test]
    fn stream_reader_rejects_corruption() {
        let cfg = StreamConfig { n_points: 32, ..StreamConfig::new(DomainParams::source(), 3) };
        let frames = make_stream(&cfg, 2, 0).unwrap();
        let cats = CategoryInfo::from_specs(&cfg.categories);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.stream");
        write_stream(&path, &frames, cfg.bins, &cats).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = dir.path().join("cut.stream");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_stream(&cut), Err(Error::InvalidStream(_))));

        let pad = dir.path().join("pad.stream");
        let mut longer = bytes.clone();
        longer.push(0);
        std::fs::write(&pad, &longer).unwrap();
        assert!(matches!(read_stream(&pad), Err(Error::InvalidStream(_))));

        assert!(read_stream(&dir.path().join("missing.stream")).is_err());
    }

    #[test]
    fn unknown_category_fails_to_write() {
        let cfg = StreamConfig { n_points: 32, ..StreamConfig::new(DomainParams::source(), 3) };
        let frames = make_stream(&cfg, 1, 0).unwrap();
        let cats = vec![CategoryInfo { name: "other".into(), symmetry: Symmetry::None }];
        let dir = tempfile::tempdir().unwrap();
        let res = write_stream(&dir.path().join("x.stream"), &frames, cfg.bins, &cats);
        assert!(matches!(res, Err(Error::InvalidStream(_))));
    }
}
