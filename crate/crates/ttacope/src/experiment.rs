//! End-to-end experiment plumbing: a plain-text config format, the four
//! pipeline stages (generate, pretrain, tta, report) as callable functions,
//! and the on-disk layout tying them together.
//!
//! A run directory looks like:
//!
//! ```text
//! out/
//!   config.txt           canonical config echo (written by generate)
//!   source.stream        labeled source frames
//!   target.stream        shifted target frames
//!   generate.manifest    key=value stream facts
//!   checkpoint.bin       pretrained model
//!   pretrain_curve.csv   step,loss
//!   pretrain.manifest    key=value training facts
//!   tta/<tag>.jsonl        one JSON record per frame
//!   tta/<tag>.summary.json deterministic scores (no wall time)
//!   tta/<tag>.summary.csv  scores plus wall time
//!   report.csv           merged summaries, sorted by tag
//!   <tag>.rot_err.txt    per-frame rotation error series
//! ```
//!
//! Everything except the wall-time column in the CSVs is a pure function of
//! the config, so reruns produce byte-identical streams, checkpoints,
//! per-frame records and summary JSON.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::adaptation::{
    pretrain, run_method, Method, MethodRun, PretrainConfig, TtaConfig,
};
use crate::error::Error;
use crate::filtering::{EnsembleMode, ModelTag};
use crate::geometry::ObservedCloud;
use crate::metrics::{evaluate_frame, summarize, EvalSummary, FrameEval};
use crate::predictor::{load_checkpoint, save_checkpoint, ModelParams};
use crate::synth::{
    category_by_name, default_categories, make_streams, read_stream, write_stream, CategoryInfo,
    DomainParams, FrameRecord, StreamConfig, StreamData,
};

/// Pipeline failure with a process exit code: 2 for config or validation
/// problems, 3 for I/O, 4 for a bad command-line argument.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    BadArgument(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::BadArgument(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::BadArgument(m) => write!(f, "bad argument: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn io_ctx(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Stream shape and size knobs. The target stream gets its own tilt limit:
/// a wider pose range on the target side is part of the domain shift, the
/// capture conditions in `DomainParams` being the other part.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamsSection {
    pub categories: Vec<String>,
    pub n_points: usize,
    pub bins: usize,
    pub max_tilt_deg: f64,
    pub target_max_tilt_deg: f64,
    pub source_frames: usize,
    pub target_frames: usize,
    pub seed: u64,
}

/// Predictor architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub seed: u64,
}

/// What the tta stage runs when no `--method` override is given. Methods
/// run at the default interval and ensemble; each extra ensemble and each
/// extra interval adds a full-method variant run. Empty lists fall back to
/// the single `[tta]` setting.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunSection {
    pub methods: Vec<Method>,
    pub ensembles: Vec<EnsembleMode>,
    pub intervals: Vec<u64>,
}

/// Full experiment description. Parsed from and serialized to a plain
/// `key = value` text format with `[section]` headers; unknown sections or
/// keys are rejected so typos fail loudly.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub streams: StreamsSection,
    pub source_domain: DomainParams,
    pub target_domain: DomainParams,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub tta: TtaConfig,
    pub run: RunSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            streams: StreamsSection {
                categories: vec!["box".into(), "can".into(), "bottle".into(), "tray".into()],
                n_points: 512,
                bins: 32,
                max_tilt_deg: 15.0,
                target_max_tilt_deg: 15.0,
                source_frames: 160,
                target_frames: 300,
                seed: 7,
            },
            source_domain: DomainParams { rng_seed: 11, ..DomainParams::source() },
            target_domain: DomainParams { rng_seed: 13, ..DomainParams::target() },
            model: ModelSection { hidden: vec![96, 96], seed: 1 },
            pretrain: PretrainConfig {
                epochs: 60,
                learning_rate: 3e-3,
                ..PretrainConfig::default()
            },
            tta: TtaConfig { learning_rate: 1e-3, gamma: 0.95, ..TtaConfig::default() },
            run: RunSection::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(value: &str, ctx: &str) -> Result<T, CliError> {
    value
        .parse::<T>()
        .map_err(|_| CliError::Config(format!("{ctx}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(value: &str, ctx: &str) -> Result<Vec<T>, CliError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num::<T>(v.trim(), ctx)).collect()
}

fn parse_schedule(value: &str, ctx: &str) -> Result<Vec<(f64, f64)>, CliError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| CliError::Config(format!("{ctx}: expected frac:mult, got {pair:?}")))?;
            Ok((parse_num::<f64>(a.trim(), ctx)?, parse_num::<f64>(b.trim(), ctx)?))
        })
        .collect()
}

fn format_schedule(schedule: &[(f64, f64)]) -> String {
    schedule
        .iter()
        .map(|(a, b)| format!("{a}:{b}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn format_list<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        let mut seen = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = idx + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(inner) = line.strip_prefix('[') {
                let name = inner
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::Config(format!("line {lineno}: unterminated section header")))?
                    .trim();
                if !matches!(
                    name,
                    "streams"
                        | "domain.source"
                        | "domain.target"
                        | "model"
                        | "pretrain"
                        | "ransac"
                        | "tta"
                        | "run"
                ) {
                    return Err(CliError::Config(format!("line {lineno}: unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {lineno}: expected key = value")))?;
            let key = key.trim();
            let value = value.trim();
            if section.is_empty() {
                return Err(CliError::Config(format!("line {lineno}: key {key:?} before any section")));
            }
            let ctx = format!("{section}.{key}");
            if !seen.insert(ctx.clone()) {
                return Err(CliError::Config(format!("line {lineno}: duplicate key {ctx}")));
            }
            cfg.apply(&section, key, value, &ctx)
                .map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!("line {lineno}: {m}")),
                    other => other,
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str, ctx: &str) -> Result<(), CliError> {
        let domain = |d: &mut DomainParams, key: &str| -> Result<(), CliError> {
            match key {
                "noise_sigma" => d.noise_sigma = parse_num(value, ctx)?,
                "dropout" => d.dropout = parse_num(value, ctx)?,
                "bias" => d.bias = parse_num(value, ctx)?,
                "partial_view" => d.partial_view = parse_num(value, ctx)?,
                "rng_seed" => d.rng_seed = parse_num(value, ctx)?,
                _ => return Err(CliError::Config(format!("unknown key {ctx}"))),
            }
            Ok(())
        };
        match section {
            "streams" => match key {
                "categories" => {
                    self.streams.categories =
                        value.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect()
                }
                "n_points" => self.streams.n_points = parse_num(value, ctx)?,
                "bins" => self.streams.bins = parse_num(value, ctx)?,
                "max_tilt_deg" => self.streams.max_tilt_deg = parse_num(value, ctx)?,
                "target_max_tilt_deg" => self.streams.target_max_tilt_deg = parse_num(value, ctx)?,
                "source_frames" => self.streams.source_frames = parse_num(value, ctx)?,
                "target_frames" => self.streams.target_frames = parse_num(value, ctx)?,
                "seed" => self.streams.seed = parse_num(value, ctx)?,
                _ => return Err(CliError::Config(format!("unknown key {ctx}"))),
            },
            "domain.source" => domain(&mut self.source_domain, key)?,
            "domain.target" => domain(&mut self.target_domain, key)?,
            "model" => match key {
                "hidden" => self.model.hidden = parse_list(value, ctx)?,
                "seed" => self.model.seed = parse_num(value, ctx)?,
                _ => return Err(CliError::Config(format!("unknown key {ctx}"))),
            },
            "pretrain" => match key {
                "epochs" => self.pretrain.epochs = parse_num(value, ctx)?,
                "learning_rate" => self.pretrain.learning_rate = parse_num(value, ctx)?,
                "jitter_sigma" => self.pretrain.jitter_sigma = parse_num(value, ctx)?,
                "dropout_rate" => self.pretrain.dropout_rate = parse_num(value, ctx)?,
                "lambda_ce" => self.pretrain.weights.lambda_ce = parse_num(value, ctx)?,
                "lambda_c" => self.pretrain.weights.lambda_c = parse_num(value, ctx)?,
                "lr_schedule" => self.pretrain.lr_schedule = parse_schedule(value, ctx)?,
                "seed" => self.pretrain.seed = parse_num(value, ctx)?,
                _ => return Err(CliError::Config(format!("unknown key {ctx}"))),
            },
            "ransac" => match key {
                "max_iterations" => self.tta.ransac.max_iterations = parse_num(value, ctx)?,
                "sample_size" => self.tta.ransac.sample_size = parse_num(value, ctx)?,
                "inlier_threshold" => self.tta.ransac.inlier_threshold = parse_num(value, ctx)?,
                _ => return Err(CliError::Config(format!("unknown key {ctx}"))),
            },
            "tta" => match key {
                "method" => self.tta.method = value.parse()?,
                "gamma" => self.tta.gamma = parse_num(value, ctx)?,
                "rho" => self.tta.rho = parse_num(value, ctx)?,
                "update_interval" => self.tta.update_interval = parse_num(value, ctx)?,
                "learning_rate" => self.tta.learning_rate = parse_num(value, ctx)?,
                "lambda_d" => self.tta.weights.lambda_d = parse_num(value, ctx)?,
                "lambda_pl" => self.tta.weights.lambda_pl = parse_num(value, ctx)?,
                "ensemble" => self.tta.ensemble = value.parse()?,
                "seed" => self.tta.rng_seed = parse_num(value, ctx)?,
                _ => return Err(CliError::Config(format!("unknown key {ctx}"))),
            },
            "run" => match key {
                "methods" => self.run.methods = parse_list(value, ctx)?,
                "ensembles" => self.run.ensembles = parse_list(value, ctx)?,
                "intervals" => self.run.intervals = parse_list(value, ctx)?,
                _ => return Err(CliError::Config(format!("unknown key {ctx}"))),
            },
            _ => unreachable!("section names are checked at the header"),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let s = &self.streams;
        if s.categories.is_empty() {
            return bad("streams.categories must not be empty".into());
        }
        let catalog = default_categories();
        for c in &s.categories {
            if category_by_name(&catalog, c).is_none() {
                let known = catalog.iter().map(|k| k.name.as_str()).collect::<Vec<_>>().join(", ");
                return bad(format!("unknown category {c:?} (known: {known})"));
            }
        }
        if s.n_points < 4 {
            return bad("streams.n_points must be at least 4".into());
        }
        if s.bins < 2 {
            return bad("streams.bins must be at least 2".into());
        }
        if !(0.0..=180.0).contains(&s.max_tilt_deg) {
            return bad("streams.max_tilt_deg must lie in [0, 180]".into());
        }
        if !(0.0..=180.0).contains(&s.target_max_tilt_deg) {
            return bad("streams.target_max_tilt_deg must lie in [0, 180]".into());
        }
        if s.source_frames == 0 || s.target_frames == 0 {
            return bad("stream frame counts must be positive".into());
        }
        for (name, d) in [("source", &self.source_domain), ("target", &self.target_domain)] {
            if d.noise_sigma < 0.0 {
                return bad(format!("domain.{name}.noise_sigma must not be negative"));
            }
            if !(0.0..1.0).contains(&d.dropout) {
                return bad(format!("domain.{name}.dropout must lie in [0, 1)"));
            }
            if !(d.partial_view > 0.0 && d.partial_view <= 1.0) {
                return bad(format!("domain.{name}.partial_view must lie in (0, 1]"));
            }
        }
        if self.pretrain.learning_rate <= 0.0 || self.tta.learning_rate <= 0.0 {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.pretrain.dropout_rate) {
            return bad("pretrain.dropout_rate must lie in [0, 1)".into());
        }
        let mut prev = f64::NEG_INFINITY;
        for &(frac, mult) in &self.pretrain.lr_schedule {
            if !(0.0..=1.0).contains(&frac) || frac < prev {
                return bad("pretrain.lr_schedule fractions must ascend within [0, 1]".into());
            }
            if mult <= 0.0 {
                return bad("pretrain.lr_schedule multipliers must be positive".into());
            }
            prev = frac;
        }
        let r = &self.tta.ransac;
        if r.max_iterations == 0 {
            return bad("ransac.max_iterations must be positive".into());
        }
        if r.sample_size < 3 {
            return bad("ransac.sample_size must be at least 3".into());
        }
        if r.inlier_threshold <= 0.0 {
            return bad("ransac.inlier_threshold must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tta.gamma) {
            return bad("tta.gamma must lie in [0, 1]".into());
        }
        if self.tta.rho <= 0.0 {
            return bad("tta.rho must be positive".into());
        }
        if self.tta.update_interval == 0 {
            return bad("tta.update_interval must be at least 1".into());
        }
        if self.tta.weights.lambda_d < 0.0 || self.tta.weights.lambda_pl < 0.0 {
            return bad("tta loss weights must not be negative".into());
        }
        if self.run.intervals.iter().any(|&i| i == 0) {
            return bad("run.intervals entries must be at least 1".into());
        }
        Ok(())
    }

    /// The (method, interval, ensemble) combinations the tta stage runs,
    /// deduplicated by tag and in config order.
    pub fn run_combos(&self) -> Vec<(Method, u64, EnsembleMode)> {
        let t = &self.tta;
        let mut combos = Vec::new();
        if self.run.methods.is_empty() {
            combos.push((t.method, t.update_interval, t.ensemble));
        }
        for &m in &self.run.methods {
            combos.push((m, t.update_interval, t.ensemble));
        }
        for &e in &self.run.ensembles {
            combos.push((Method::TtaCope, t.update_interval, e));
        }
        for &i in &self.run.intervals {
            combos.push((Method::TtaCope, i, t.ensemble));
        }
        let mut seen = BTreeSet::new();
        combos.retain(|&(m, i, e)| seen.insert(run_tag(m, i, e)));
        combos
    }

    /// Serializes every knob in a fixed order. Parsing the result yields an
    /// equal config, and re-serializing that is byte-identical.
    pub fn canonical_string(&self) -> String {
        let mut out = String::new();
        let s = &self.streams;
        let _ = writeln!(out, "[streams]");
        let _ = writeln!(out, "categories = {}", s.categories.join(","));
        let _ = writeln!(out, "n_points = {}", s.n_points);
        let _ = writeln!(out, "bins = {}", s.bins);
        let _ = writeln!(out, "max_tilt_deg = {}", s.max_tilt_deg);
        let _ = writeln!(out, "target_max_tilt_deg = {}", s.target_max_tilt_deg);
        let _ = writeln!(out, "source_frames = {}", s.source_frames);
        let _ = writeln!(out, "target_frames = {}", s.target_frames);
        let _ = writeln!(out, "seed = {}", s.seed);
        for (name, d) in [("source", &self.source_domain), ("target", &self.target_domain)] {
            let _ = writeln!(out, "\n[domain.{name}]");
            let _ = writeln!(out, "noise_sigma = {}", d.noise_sigma);
            let _ = writeln!(out, "dropout = {}", d.dropout);
            let _ = writeln!(out, "bias = {}", d.bias);
            let _ = writeln!(out, "partial_view = {}", d.partial_view);
            let _ = writeln!(out, "rng_seed = {}", d.rng_seed);
        }
        let _ = writeln!(out, "\n[model]");
        let _ = writeln!(out, "hidden = {}", format_list(&self.model.hidden));
        let _ = writeln!(out, "seed = {}", self.model.seed);
        let p = &self.pretrain;
        let _ = writeln!(out, "\n[pretrain]");
        let _ = writeln!(out, "epochs = {}", p.epochs);
        let _ = writeln!(out, "learning_rate = {}", p.learning_rate);
        let _ = writeln!(out, "jitter_sigma = {}", p.jitter_sigma);
        let _ = writeln!(out, "dropout_rate = {}", p.dropout_rate);
        let _ = writeln!(out, "lambda_ce = {}", p.weights.lambda_ce);
        let _ = writeln!(out, "lambda_c = {}", p.weights.lambda_c);
        let _ = writeln!(out, "lr_schedule = {}", format_schedule(&p.lr_schedule));
        let _ = writeln!(out, "seed = {}", p.seed);
        let r = &self.tta.ransac;
        let _ = writeln!(out, "\n[ransac]");
        let _ = writeln!(out, "max_iterations = {}", r.max_iterations);
        let _ = writeln!(out, "sample_size = {}", r.sample_size);
        let _ = writeln!(out, "inlier_threshold = {}", r.inlier_threshold);
        let t = &self.tta;
        let _ = writeln!(out, "\n[tta]");
        let _ = writeln!(out, "method = {}", t.method);
        let _ = writeln!(out, "gamma = {}", t.gamma);
        let _ = writeln!(out, "rho = {}", t.rho);
        let _ = writeln!(out, "update_interval = {}", t.update_interval);
        let _ = writeln!(out, "learning_rate = {}", t.learning_rate);
        let _ = writeln!(out, "lambda_d = {}", t.weights.lambda_d);
        let _ = writeln!(out, "lambda_pl = {}", t.weights.lambda_pl);
        let _ = writeln!(out, "ensemble = {}", t.ensemble);
        let _ = writeln!(out, "seed = {}", t.rng_seed);
        let r = &self.run;
        let _ = writeln!(out, "\n[run]");
        let _ = writeln!(out, "methods = {}", format_list(&r.methods));
        let _ = writeln!(out, "ensembles = {}", format_list(&r.ensembles));
        let _ = writeln!(out, "intervals = {}", format_list(&r.intervals));
        out
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_ctx(path, e))?;
        Self::parse(&text)
    }

    /// Source and target stream configs this experiment describes.
    pub fn stream_configs(&self) -> (StreamConfig, StreamConfig) {
        let catalog = default_categories();
        let specs: Vec<_> = self
            .streams
            .categories
            .iter()
            .map(|name| category_by_name(&catalog, name).expect("validated").clone())
            .collect();
        let base = StreamConfig {
            categories: specs,
            n_points: self.streams.n_points,
            bins: self.streams.bins,
            max_tilt_deg: self.streams.max_tilt_deg,
            domain: self.source_domain.clone(),
            seed: self.streams.seed,
        };
        let target = StreamConfig {
            domain: self.target_domain.clone(),
            max_tilt_deg: self.streams.target_max_tilt_deg,
            ..base.clone()
        };
        (base, target)
    }
}

/// File tag for one tta invocation: the method name, plus the update
/// interval when it is not 1, plus the ensemble mode when the method uses
/// one and it is not the default.
pub fn run_tag(method: Method, update_interval: u64, ensemble: EnsembleMode) -> String {
    let mut tag = method.as_str().to_string();
    if update_interval != 1 {
        let _ = write!(tag, "-int{update_interval}");
    }
    if method == Method::TtaCope && ensemble != EnsembleMode::InlierMax {
        let _ = write!(tag, "-{ensemble}");
    }
    tag
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_ctx(path, e))
}

/// Builds both streams and writes them plus the canonical config and a
/// small manifest into `out`.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| io_ctx(out, e))?;
    let (src_cfg, tgt_cfg) = cfg.stream_configs();
    let (src, tgt) = make_streams(
        &src_cfg,
        &tgt_cfg,
        (cfg.streams.source_frames, cfg.streams.target_frames),
    )?;
    let infos = CategoryInfo::from_specs(&src_cfg.categories);
    write_stream(&out.join("source.stream"), &src, cfg.streams.bins, &infos)?;
    write_stream(&out.join("target.stream"), &tgt, cfg.streams.bins, &infos)?;
    write_file(&out.join("config.txt"), &cfg.canonical_string())?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "source_frames = {}", src.len());
    let _ = writeln!(manifest, "target_frames = {}", tgt.len());
    let _ = writeln!(manifest, "n_points = {}", cfg.streams.n_points);
    let _ = writeln!(manifest, "bins = {}", cfg.streams.bins);
    let _ = writeln!(manifest, "categories = {}", cfg.streams.categories.join(","));
    write_file(&out.join("generate.manifest"), &manifest)?;
    log::info!(
        "generated {} source and {} target frames into {}",
        src.len(),
        tgt.len(),
        out.display()
    );
    Ok(())
}

/// Trains a fresh model on `out/source.stream` and writes the checkpoint,
/// loss curve and a manifest.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let stream_path = out.join("source.stream");
    let data = read_stream(&stream_path)?;
    if data.bins != cfg.streams.bins {
        return Err(CliError::Config(format!(
            "{} holds {}-bin labels but the config asks for {}",
            stream_path.display(),
            data.bins,
            cfg.streams.bins
        )));
    }
    let mut model = ModelParams::init(&cfg.model.hidden, data.bins, cfg.model.seed);
    let report = pretrain(&mut model, &data.frames, &cfg.pretrain)?;
    save_checkpoint(&model, &out.join("checkpoint.bin"))?;
    let mut curve = String::from("step,loss\n");
    for (i, loss) in report.step_losses.iter().enumerate() {
        let _ = writeln!(curve, "{i},{loss:.6}");
    }
    write_file(&out.join("pretrain_curve.csv"), &curve)?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "steps = {}", report.step_losses.len());
    let _ = writeln!(manifest, "final_ce = {:.6}", report.final_ce);
    let _ = writeln!(manifest, "parameters = {}", model.parameter_count());
    let _ = writeln!(manifest, "dims = {}", format_list(&model.dims()));
    write_file(&out.join("pretrain.manifest"), &manifest)?;
    log::info!(
        "pretrained for {} steps, final stream cross-entropy {:.4}",
        report.step_losses.len(),
        report.final_ce
    );
    Ok(())
}

#[derive(Serialize)]
struct FrameRow<'a> {
    frame: usize,
    rotation: [f64; 9],
    translation: [f64; 3],
    scale: f64,
    est_size: [f64; 3],
    winner: Option<ModelTag>,
    inliers_student: Option<usize>,
    inliers_teacher: Option<usize>,
    loss_depth: Option<f64>,
    loss_pseudo: Option<f64>,
    loss_entropy: Option<f64>,
    updated: bool,
    skipped_update: bool,
    rot_err_deg: Option<f64>,
    trans_err_m: Option<f64>,
    iou: Option<f64>,
    category: &'a str,
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    tag: &'a str,
    method: &'a str,
    frames: usize,
    updates: usize,
    skipped_updates: usize,
    scores: Option<&'a EvalSummary>,
}

fn frame_evals(run: &MethodRun, data: &StreamData) -> Vec<Option<FrameEval>> {
    run.frames
        .iter()
        .map(|f| {
            let rec: &FrameRecord = &data.frames[f.frame];
            match (&rec.gt_pose, &rec.gt_size) {
                (Some(gt_pose), Some(gt_size)) => Some(FrameEval {
                    est_pose: f.pose.clone(),
                    est_size: f.est_size,
                    gt_pose: gt_pose.clone(),
                    gt_size: *gt_size,
                    category: rec.category.clone(),
                    symmetry: data.symmetry_of(&rec.category),
                }),
                _ => None,
            }
        })
        .collect()
}

fn summary_csv(tag: &str, run: &MethodRun, scores: Option<&EvalSummary>) -> String {
    let mut out = String::from(
        "tag,method,frames,updates,skipped_updates,iou50,iou75,deg5cm2,deg5cm5,deg10cm2,deg10cm5,mean_rot_deg,mean_trans_m,tta_time_s\n",
    );
    let s = &run.summary;
    let score_cols = match scores {
        Some(ev) => format!(
            "{},{:.6},{:.6}",
            ev.overall.csv_row(),
            ev.overall.mean_rot_deg,
            ev.overall.mean_trans_m
        ),
        None => "nan,nan,nan,nan,nan,nan,nan,nan".to_string(),
    };
    let _ = writeln!(
        out,
        "{tag},{},{},{},{},{score_cols},{:.3}",
        s.method, s.frames, s.updates, s.skipped_updates, s.wall_seconds
    );
    out
}

/// Runs the configured adaptation methods over `out/target.stream` starting
/// from `out/checkpoint.bin` and writes per-frame records plus summaries
/// under `out/tta/`, one file set per run tag. Ground truth, when the stream
/// carries it, is only touched here, after each run, for scoring.
pub fn cmd_tta(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let data = read_stream(&out.join("target.stream"))?;
    let model = load_checkpoint(&out.join("checkpoint.bin"))?;
    if model.bins() != data.bins {
        return Err(CliError::Config(format!(
            "checkpoint predicts {} bins but the stream holds {}",
            model.bins(),
            data.bins
        )));
    }
    let clouds: Vec<_> = data.frames.iter().map(|f| f.cloud.clone()).collect();
    for (method, interval, ensemble) in cfg.run_combos() {
        let tta = TtaConfig {
            method,
            update_interval: interval,
            ensemble,
            ..cfg.tta.clone()
        };
        run_one(&tta, &model, &clouds, &data, out)?;
    }
    Ok(())
}

fn run_one(
    tta: &TtaConfig,
    model: &ModelParams,
    clouds: &[ObservedCloud],
    data: &StreamData,
    out: &Path,
) -> Result<(), CliError> {
    let run = run_method(tta.method, model, clouds, tta)?;
    let tag = run_tag(tta.method, tta.update_interval, tta.ensemble);

    let evals = frame_evals(&run, data);
    let scored: Vec<FrameEval> = evals.iter().flatten().cloned().collect();
    let summary_scores =
        if scored.is_empty() { None } else { Some(summarize(&scored)?) };

    let tta_dir = out.join("tta");
    fs::create_dir_all(&tta_dir).map_err(|e| io_ctx(&tta_dir, e))?;
    let mut jsonl = String::new();
    for (f, eval) in run.frames.iter().zip(&evals) {
        let scores = eval.as_ref().map(evaluate_frame);
        let r = &f.pose.rotation;
        let row = FrameRow {
            frame: f.frame,
            rotation: [
                r[(0, 0)], r[(0, 1)], r[(0, 2)],
                r[(1, 0)], r[(1, 1)], r[(1, 2)],
                r[(2, 0)], r[(2, 1)], r[(2, 2)],
            ],
            translation: [f.pose.translation.x, f.pose.translation.y, f.pose.translation.z],
            scale: f.pose.scale,
            est_size: [f.est_size.x, f.est_size.y, f.est_size.z],
            winner: f.winner,
            inliers_student: f.inliers_student,
            inliers_teacher: f.inliers_teacher,
            loss_depth: f.loss_depth,
            loss_pseudo: f.loss_pseudo,
            loss_entropy: f.loss_entropy,
            updated: f.updated,
            skipped_update: f.skipped_update,
            rot_err_deg: scores.map(|s| s.rot_deg),
            trans_err_m: scores.map(|s| s.trans_m),
            iou: scores.map(|s| s.iou),
            category: &data.frames[f.frame].category,
        };
        jsonl.push_str(
            &serde_json::to_string(&row).map_err(|e| CliError::Io(e.to_string()))?,
        );
        jsonl.push('\n');
    }
    write_file(&tta_dir.join(format!("{tag}.jsonl")), &jsonl)?;

    let summary = SummaryFile {
        tag: &tag,
        method: tta.method.as_str(),
        frames: run.summary.frames,
        updates: run.summary.updates,
        skipped_updates: run.summary.skipped_updates,
        scores: summary_scores.as_ref(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Io(e.to_string()))?;
    write_file(&tta_dir.join(format!("{tag}.summary.json")), &(json + "\n"))?;
    write_file(
        &tta_dir.join(format!("{tag}.summary.csv")),
        &summary_csv(&tag, &run, summary_scores.as_ref()),
    )?;
    match &summary_scores {
        Some(ev) => log::info!(
            "{tag}: {} frames, mean rotation error {:.2} deg, deg5cm5 {:.3}",
            run.summary.frames,
            ev.overall.mean_rot_deg,
            ev.overall.deg5cm5
        ),
        None => log::info!("{tag}: {} frames, stream carries no ground truth", run.summary.frames),
    }
    Ok(())
}

/// Merges every `out/tta/*.summary.csv` into `out/report.csv` (sorted by
/// tag) and extracts a per-frame rotation-error series per tag.
pub fn cmd_report(out: &Path) -> Result<(), CliError> {
    let tta_dir = out.join("tta");
    let entries = fs::read_dir(&tta_dir).map_err(|e| io_ctx(&tta_dir, e))?;
    let mut tags = Vec::new();
    for entry in entries {
        let name = entry.map_err(|e| io_ctx(&tta_dir, e))?.file_name();
        let name = name.to_string_lossy().into_owned();
        if let Some(tag) = name.strip_suffix(".summary.csv") {
            tags.push(tag.to_string());
        }
    }
    if tags.is_empty() {
        return Err(CliError::Config(format!(
            "no summaries under {}; run the tta stage first",
            tta_dir.display()
        )));
    }
    tags.sort();

    let mut report = String::new();
    for (i, tag) in tags.iter().enumerate() {
        let path = tta_dir.join(format!("{tag}.summary.csv"));
        let text = fs::read_to_string(&path).map_err(|e| io_ctx(&path, e))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if i == 0 {
            report.push_str(header);
            report.push('\n');
        } else if header != report.lines().next().unwrap_or_default() {
            return Err(CliError::Config(format!("{}: header differs", path.display())));
        }
        for line in lines {
            if !line.trim().is_empty() {
                report.push_str(line);
                report.push('\n');
            }
        }

        let jsonl_path = tta_dir.join(format!("{tag}.jsonl"));
        let jsonl = fs::read_to_string(&jsonl_path).map_err(|e| io_ctx(&jsonl_path, e))?;
        let mut series = String::new();
        for line in jsonl.lines() {
            let row: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| CliError::Config(format!("{}: {e}", jsonl_path.display())))?;
            let frame = row.get("frame").and_then(|v| v.as_u64()).unwrap_or(0);
            match row.get("rot_err_deg").and_then(|v| v.as_f64()) {
                Some(err) => {
                    let _ = writeln!(series, "{frame} {err:.4}");
                }
                None => {
                    let _ = writeln!(series, "{frame} nan");
                }
            }
        }
        write_file(&out.join(format!("{tag}.rot_err.txt")), &series)?;
    }
    write_file(&out.join("report.csv"), &report)?;
    log::info!("merged {} summaries into {}", tags.len(), out.join("report.csv").display());
    Ok(())
}
