//! Command implementations behind the `dunet` binary.

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dunet::augment::{build_dataset, AugmentConfig, BagSource, DirSource, FrameSource, PixelBox, TranslatingSquare};
use dunet::checkpoint::{load_model, CheckpointError};
use dunet::dataset::{gen_shapes_dataset, is_small, load_dataset, split_dataset, AnnotatedDataset, ShapesConfig};
use dunet::detector::{evaluate_with_tier, DunetDetector, OracleDetector};
use dunet::geometry::DecodeParams;
use dunet::metrics::{ApInterp, EvalThresholds};
use dunet::model::{build_dunet, DunetConfig};
use dunet::stream::{compare_runs, make_bag, read_bag, replay, BagStore, Clock, StreamReport};
use dunet::train::{load_samples, train, TrainError, Trainer};

use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_INCOMPATIBLE: i32 = 4;
pub const THREADS_ENV: &str = "DUNET_THREADS";

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration or missing inputs.
    Usage(String),
    /// Training diverged.
    Numeric(String),
    /// Inputs that exist but do not fit together.
    Incompatible(String),
    Other(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Incompatible(_) => EXIT_INCOMPATIBLE,
            CliError::Other(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) | CliError::Incompatible(m) | CliError::Other(m) => m,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

fn checkpoint_err(e: CheckpointError) -> CliError {
    match e {
        CheckpointError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Usage(format!("checkpoint not found: {io}")),
        e @ (CheckpointError::Format(_) | CheckpointError::Incompatible(_)) => CliError::Incompatible(e.to_string()),
        e => other(e),
    }
}

#[derive(Parser, Debug)]
#[command(name = "dunet", version, about = "Dense upscaled multibox detector toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Replay recorded streams against a detector.
    Streambench(StreamArgs),
    /// Track an object through frames and write filtered captures.
    Augment(AugmentArgs),
    /// Generate the synthetic shapes dataset.
    Genshapes(GenArgs),
    /// Cut a single-object stream out of a dataset.
    Makebag(BagArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for checkpoint and loss curve.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.max_steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides `dataset.root`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 0.5)]
    pub iou_thresh: f64,
    #[arg(long, default_value = "all")]
    pub ap_interp: ApInterp,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
    /// Accepted for uniformity; evaluation is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct StreamArgs {
    /// Bag directory; repeat for several categories.
    #[arg(long, required = true)]
    pub bag: Vec<PathBuf>,
    #[arg(long, conflicts_with = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Replay ground truth as detections.
    #[arg(long)]
    pub oracle: bool,
    /// Simulated clock with this fixed detector latency.
    #[arg(long, conflicts_with = "real_clock")]
    pub latency_ms: Option<f64>,
    /// Stream frames in real time instead of on a simulated timeline.
    #[arg(long)]
    pub real_clock: bool,
    #[arg(long, default_value_t = 0.5)]
    pub score_thresh: f64,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value = "stream")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Directory of numbered frames or a bag directory.
    #[arg(long, required_unless_present = "synthetic_frames")]
    pub source: Option<PathBuf>,
    /// Use a generated translating-square sequence of this many frames.
    #[arg(long, conflicts_with = "source")]
    pub synthetic_frames: Option<usize>,
    /// Initial object box in pixels: x0,y0,x1,y1 (ignored for synthetic sources).
    #[arg(long = "box", value_delimiter = ',', value_name = "X0,Y0,X1,Y1")]
    pub seed_box: Option<Vec<u32>>,
    /// JSON config whose `filters` (and `stream.min_gap_ms`) are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "object")]
    pub label: String,
    /// Frame period for plain frame directories.
    #[arg(long)]
    pub period_ms: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: u32,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub min_shape: Option<u32>,
    #[arg(long)]
    pub max_shape: Option<u32>,
    #[arg(long)]
    pub small_fraction: Option<f64>,
    /// Also record a seeded train/val/test split.
    #[arg(long)]
    pub split: bool,
}

#[derive(Args, Debug)]
pub struct BagArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Class id (1-based) or class name.
    #[arg(long)]
    pub category: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub period_ms: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Reads the worker-thread cap. Compute kernels run on the calling thread;
/// only real-clock streaming uses a second (frame source) thread.
pub fn thread_cap() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(usize::MAX),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
    }
}

pub fn run(cli: Cli) -> CliResult {
    let threads = thread_cap()?;
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Streambench(a) => cmd_streambench(a, threads),
        Command::Augment(a) => cmd_augment(a),
        Command::Genshapes(a) => cmd_genshapes(a),
        Command::Makebag(a) => cmd_makebag(a),
    }
}

fn open_dataset(root: &Path) -> CliResult<AnnotatedDataset> {
    if !root.exists() {
        return Err(CliError::Usage(format!("dataset {} does not exist", root.display())));
    }
    load_dataset(root).map_err(usage)
}

pub fn cmd_train(a: TrainArgs) -> CliResult {
    let mut cfg = RunConfig::load(&a.config).map_err(CliError::Usage)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.train.max_steps = n;
    }
    if let Some(d) = a.dataset {
        cfg.dataset.root = Some(d);
    }
    cfg.train.validate().map_err(usage)?;
    let root = cfg.dataset.root.clone().ok_or_else(|| usage("config has no dataset.root"))?;
    let mut ds = open_dataset(&root)?;
    if ds.splits.is_none() && cfg.dataset.split_ratios.0 < 1.0 {
        ds.splits = Some(split_dataset(&ds.frames, cfg.dataset.split_ratios, cfg.dataset.split_seed).map_err(usage)?);
    }
    let model_cfg = cfg.model.clone().unwrap_or_else(|| DunetConfig::desk(ds.num_classes()));
    if model_cfg.num_classes != ds.num_classes() {
        return Err(CliError::Incompatible(format!(
            "model has {} classes, dataset {} has {}",
            model_cfg.num_classes,
            root.display(),
            ds.num_classes()
        )));
    }
    let model = build_dunet(&model_cfg, cfg.train.seed).map_err(usage)?;
    let frames = ds.split_frames(&cfg.dataset.train_split).map_err(usage)?;
    let samples = load_samples(&ds, &frames, model_cfg.input_size).map_err(other)?;
    log::info!("training on {} frames for {} steps", samples.len(), cfg.train.max_steps);
    let mut trainer = Trainer::new(model, cfg.train.clone()).map_err(usage)?;
    let report = match train(&mut trainer, &samples, Some(&a.out)) {
        Ok(r) => r,
        Err(e @ TrainError::NonFinite { .. }) => return Err(CliError::Numeric(e.to_string())),
        Err(e @ (TrainError::EmptyDataset | TrainError::Config(_))) => return Err(usage(e)),
        Err(e) => return Err(other(e)),
    };
    let resolved = RunConfig { model: Some(model_cfg), ..cfg };
    std::fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&resolved).expect("config serialize")).map_err(other)?;
    if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
        println!("loss {:.4} -> {:.4} over {} steps", first.total, last.total, report.losses.len());
    }
    if let Some(p) = report.checkpoint {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

pub fn cmd_eval(a: EvalArgs) -> CliResult {
    let model = load_model(&a.checkpoint).map_err(checkpoint_err)?;
    let ds = open_dataset(&a.dataset)?;
    if model.cfg.num_classes != ds.num_classes() {
        return Err(CliError::Incompatible(format!(
            "checkpoint has {} classes, dataset has {}",
            model.cfg.num_classes,
            ds.num_classes()
        )));
    }
    if !(a.iou_thresh > 0.0 && a.iou_thresh <= 1.0) {
        return Err(usage("--iou-thresh must be in (0, 1]"));
    }
    let frames = ds.split_frames(&a.split).map_err(usage)?;
    let th = EvalThresholds { iou: a.iou_thresh, interp: a.ap_interp, ..EvalThresholds::default() };
    let mut det = DunetDetector::new(model, DecodeParams::EVAL);
    let (full, small) = evaluate_with_tier(&mut det, &ds, &frames, &th, &is_small).map_err(other)?;
    std::fs::create_dir_all(&a.out).map_err(other)?;
    full.write_csv(&a.out.join("per_class.csv")).map_err(other)?;
    small.write_csv(&a.out.join("per_class_small.csv")).map_err(other)?;
    let summary = serde_json::json!({ "all": full, "small": small, "frames": frames.len() });
    std::fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("json")).map_err(other)?;
    for c in &full.per_class {
        println!("{:>16}  AP {:.4}", c.name, c.ap);
    }
    println!("mAP {:.4}  small-object mAP {:.4}", full.map, small.map);
    println!("precision {:.4}  recall {:.4}  accuracy {:.4}", full.precision, full.recall, full.accuracy);
    Ok(())
}

pub fn cmd_streambench(a: StreamArgs, threads: usize) -> CliResult {
    if a.checkpoint.is_none() && !a.oracle {
        return Err(usage("give --checkpoint or --oracle"));
    }
    let clock = match (a.latency_ms, a.real_clock) {
        (Some(l), _) if !(l >= 0.0 && l.is_finite()) => return Err(usage("--latency-ms must be >= 0")),
        (Some(l), _) => Clock::Simulated { latency_ms: l },
        (None, true) if threads < 2 => return Err(usage(format!("real-clock replay needs 2 threads, {THREADS_ENV} allows {threads}"))),
        (None, true) => Clock::Real,
        (None, false) => Clock::Measured,
    };
    let model = match &a.checkpoint {
        Some(p) => Some(load_model(p).map_err(checkpoint_err)?),
        None => None,
    };
    let params = DecodeParams { score_threshold: a.score_thresh, ..DecodeParams::STREAM };
    let mut det = model.map(|m| DunetDetector::new(m, params));
    let mut reports: Vec<StreamReport> = Vec::new();
    for bag in &a.bag {
        if !bag.join(dunet::stream::STREAM_FILE).exists() {
            return Err(CliError::Usage(format!("bag {} not found", bag.display())));
        }
        let spec = read_bag(bag).map_err(usage)?;
        let store = BagStore::new(bag, &spec);
        let base = a.name.clone().unwrap_or_else(|| if a.oracle { "oracle".into() } else { "dunet".into() });
        let name = if a.bag.len() > 1 { format!("{base}:{}", spec.category_name) } else { base };
        let report = match det.as_mut() {
            Some(d) => {
                if spec.category > d.num_classes() {
                    return Err(CliError::Incompatible(format!("bag class {} not in model", spec.category)));
                }
                replay(&name, &spec, &store, d, clock)
            }
            None => replay(&name, &spec, &store, &mut OracleDetector { truth: spec.truth() }, clock),
        }
        .map_err(other)?;
        println!(
            "{}: processed {}/{} tp {} fn {} fp {} normalized-time {:.3} ({:.1} frames/sec)",
            report.name,
            report.frames_processed,
            report.frames_total,
            report.tp,
            report.fn_,
            report.fp,
            report.normalized_time,
            report.frames_per_second()
        );
        reports.push(report);
    }
    compare_runs(&reports, &a.out).map_err(other)?;
    Ok(())
}

fn parse_box(v: &[u32]) -> CliResult<PixelBox> {
    match v {
        [x0, y0, x1, y1] if x1 > x0 && y1 > y0 => Ok(PixelBox::new(*x0, *y0, *x1, *y1)),
        _ => Err(usage(format!("--box {v:?} must be x0,y0,x1,y1 with x1>x0, y1>y0"))),
    }
}

pub fn cmd_augment(a: AugmentArgs) -> CliResult {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p).map_err(CliError::Usage)?,
        None => RunConfig::default(),
    };
    let filters = if cfg.filters.is_empty() {
        use dunet::augment::{FilterKind::*, FilterSpec};
        [Brightness, Contrast, Rotation, Flip, Shadow, Background, ColorShift].map(|k| FilterSpec::new(k, 1.0)).to_vec()
    } else {
        cfg.filters.clone()
    };
    let (source, initial): (Box<dyn FrameSource>, PixelBox) = match (&a.source, a.synthetic_frames) {
        (_, Some(0)) => return Err(usage("--synthetic-frames must be >= 1")),
        (_, Some(n)) => {
            let s = TranslatingSquare::new(n, a.seed);
            let b = s.truth(0);
            (Box::new(s), b)
        }
        (Some(dir), None) => {
            let b = parse_box(a.seed_box.as_deref().ok_or_else(|| usage("--box is required with --source"))?)?;
            let src: Box<dyn FrameSource> = if dir.join(dunet::stream::STREAM_FILE).exists() {
                Box::new(BagSource::open(dir).map_err(usage)?)
            } else if dir.is_dir() {
                let period = a.period_ms.unwrap_or(cfg.stream.period_ms);
                Box::new(DirSource::open(dir, period).map_err(usage)?)
            } else {
                return Err(CliError::Usage(format!("source {} not found", dir.display())));
            };
            (src, b)
        }
        (None, None) => return Err(usage("give --source or --synthetic-frames")),
    };
    if source.is_empty() {
        return Err(usage("source has no frames"));
    }
    let first = source.frame(0).map_err(usage)?;
    if !initial.fits(first.width(), first.height()) {
        return Err(CliError::Usage(format!("box {initial:?} is outside the {}x{} frame", first.width(), first.height())));
    }
    let acfg = AugmentConfig { filters, min_gap_ms: cfg.stream.min_gap_ms, label: a.label.clone(), sequence: 0, seed: a.seed };
    let report = build_dataset(source.as_ref(), initial, &acfg, &a.out).map_err(|e| match e {
        dunet::augment::AugmentError::InvalidFilter(_) | dunet::augment::AugmentError::NoFilters => usage(e),
        e => other(e),
    })?;
    for (k, v) in &report.counts {
        println!("{k:>12}: {v}");
    }
    println!("{} samples written to {} ({} skipped)", report.dataset.frames.len(), a.out.display(), report.skipped);
    if let Some(i) = report.lost_at {
        eprintln!("warning: tracking lost at frame {i}; dataset is partial");
    }
    Ok(())
}

pub fn cmd_genshapes(a: GenArgs) -> CliResult {
    if a.n == 0 {
        return Err(usage("--n must be >= 1"));
    }
    let mut cfg = ShapesConfig::new(a.n, a.size, a.seed);
    if let Some(lo) = a.min_shape {
        cfg.size_range.0 = lo;
    }
    if let Some(hi) = a.max_shape {
        cfg.size_range.1 = hi;
    }
    if let Some(f) = a.small_fraction {
        if !(0.0..=1.0).contains(&f) {
            return Err(usage("--small-fraction must be in [0, 1]"));
        }
        cfg.small_fraction = f;
    }
    let mut ds = gen_shapes_dataset(&cfg, &a.out).map_err(usage)?;
    if a.split {
        ds.splits = Some(split_dataset(&ds.frames, dunet::dataset::DEFAULT_RATIOS, a.seed).map_err(usage)?);
        ds.save().map_err(other)?;
    }
    let boxes: usize = ds.frames.iter().map(|f| f.boxes.len()).sum();
    println!("{} frames, {boxes} shapes written to {}", ds.frames.len(), a.out.display());
    Ok(())
}

pub fn cmd_makebag(a: BagArgs) -> CliResult {
    let ds = open_dataset(&a.dataset)?;
    let category = match a.category.parse::<usize>() {
        Ok(c) if c >= 1 && c <= ds.num_classes() => c,
        Ok(c) => return Err(CliError::Usage(format!("class id {c} outside 1..={}", ds.num_classes()))),
        Err(_) => ds
            .labels
            .iter()
            .position(|l| l == &a.category)
            .map(|i| i + 1)
            .ok_or_else(|| CliError::Usage(format!("unknown class '{}'", a.category)))?,
    };
    let period = a.period_ms.unwrap_or_else(dunet::stream::default_period_ms);
    let spec = make_bag(&ds, category, &a.out, period).map_err(usage)?;
    println!("{} frames of '{}' written to {}", spec.frames.len(), spec.category_name, a.out.display());
    Ok(())
}
