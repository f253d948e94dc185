//! On-disk annotated frame datasets.
//!
//! A dataset root holds `labels.json` (class names; class id = index + 1,
//! id 0 is background), `annotations.jsonl` (one frame per line) and the
//! frame images, written as binary PPM and read as PPM or PNG. An optional
//! `splits.json` records a train/val/test partition by frame index.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

pub const LABELS_FILE: &str = "labels.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const SPLITS_FILE: &str = "splits.json";
pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.75, 0.15, 0.10);
/// Frame rate of the capture rig; synthetic timestamps use its period.
pub const CAPTURE_FPS: f64 = 30.6;
pub const SHAPE_CLASSES: [&str; 3] = ["circle", "square", "triangle"];
/// The ten indoor object categories of the drone-captured DroSet streams.
pub const DROSET_CATEGORIES: [&str; 10] = [
    "christmas toy",
    "coffee machine",
    "potted plant",
    "tissue box",
    "robot",
    "soccer ball",
    "turtle bot",
    "UAV",
    "fire alarm",
    "tennis racket",
];
/// Boxes no wider than this fraction of the image form the small-object tier.
pub const SMALL_TIER_FRACTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image error on {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("invalid dataset:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("split error: {0}")]
    Split(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BoxRecord {
    c: usize,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FrameLine {
    image: String,
    ts: f64,
    w: u32,
    h: u32,
    boxes: Vec<BoxRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seq: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    /// Path relative to the dataset root.
    pub image_path: String,
    pub timestamp_ms: f64,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<(usize, BBox)>,
    /// Capture sequence; frames of one sequence always share a split.
    pub sequence: Option<u64>,
}

impl FrameRecord {
    pub fn sequence_key(&self, index: usize) -> u64 {
        self.sequence.unwrap_or(index as u64)
    }

    fn to_line(&self) -> FrameLine {
        FrameLine {
            image: self.image_path.clone(),
            ts: self.timestamp_ms,
            w: self.width,
            h: self.height,
            boxes: self
                .boxes
                .iter()
                .map(|(c, b)| BoxRecord { c: *c, x0: b.xmin, y0: b.ymin, x1: b.xmax, y1: b.ymax })
                .collect(),
            seq: self.sequence,
        }
    }

    fn from_line(line: FrameLine) -> Self {
        Self {
            image_path: line.image,
            timestamp_ms: line.ts,
            width: line.w,
            height: line.h,
            boxes: line.boxes.into_iter().map(|b| (b.c, BBox::new(b.x0, b.y0, b.x1, b.y1))).collect(),
            sequence: line.seq,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedDataset {
    pub root: PathBuf,
    pub labels: Vec<String>,
    pub frames: Vec<FrameRecord>,
    pub splits: Option<Splits>,
}

impl AnnotatedDataset {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn image_path(&self, frame: &FrameRecord) -> PathBuf {
        self.root.join(&frame.image_path)
    }

    pub fn load_image(&self, frame: &FrameRecord) -> Result<RgbImage> {
        read_image(&self.image_path(frame))
    }

    /// Frames of the named split, or all frames when the dataset has no splits.
    pub fn split_frames(&self, name: &str) -> Result<Vec<&FrameRecord>> {
        let Some(s) = &self.splits else {
            return Ok(self.frames.iter().collect());
        };
        let idx = match name {
            "train" => &s.train,
            "val" => &s.val,
            "test" => &s.test,
            "all" => return Ok(self.frames.iter().collect()),
            other => return Err(DatasetError::Split(format!("unknown split '{other}'"))),
        };
        Ok(idx.iter().map(|&i| &self.frames[i]).collect())
    }

    pub fn save(&self) -> Result<()> {
        let root = &self.root;
        fs::create_dir_all(root).map_err(io_err(root))?;
        let labels_path = root.join(LABELS_FILE);
        fs::write(&labels_path, serde_json::to_string_pretty(&self.labels).expect("labels serialize"))
            .map_err(io_err(&labels_path))?;
        let ann_path = root.join(ANNOTATIONS_FILE);
        let file = fs::File::create(&ann_path).map_err(io_err(&ann_path))?;
        let mut w = BufWriter::new(file);
        for f in &self.frames {
            let line = serde_json::to_string(&f.to_line()).expect("frame serialize");
            writeln!(w, "{line}").map_err(io_err(&ann_path))?;
        }
        w.flush().map_err(io_err(&ann_path))?;
        let splits_path = root.join(SPLITS_FILE);
        match &self.splits {
            Some(s) => fs::write(&splits_path, serde_json::to_string(s).expect("splits serialize"))
                .map_err(io_err(&splits_path))?,
            None if splits_path.exists() => fs::remove_file(&splits_path).map_err(io_err(&splits_path))?,
            None => {}
        }
        Ok(())
    }
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    image::open(path).map(|i| i.to_rgb8()).map_err(|source| DatasetError::Image { path: path.to_path_buf(), source })
}

/// Writes a binary (P6) PPM.
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    PnmEncoder::new(&mut w)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|source| DatasetError::Image { path: path.to_path_buf(), source })?;
    w.flush().map_err(io_err(path))
}

pub fn load_dataset(root: &Path) -> Result<AnnotatedDataset> {
    let labels_path = root.join(LABELS_FILE);
    let text = fs::read_to_string(&labels_path).map_err(io_err(&labels_path))?;
    let labels: Vec<String> = serde_json::from_str(&text)
        .map_err(|e| DatasetError::Invalid(vec![format!("{LABELS_FILE}: {e}")]))?;
    let ann_path = root.join(ANNOTATIONS_FILE);
    let file = fs::File::open(&ann_path).map_err(io_err(&ann_path))?;
    let mut problems = Vec::new();
    let mut frames = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(io_err(&ann_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameLine = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("line {lineno}: malformed record: {e}"));
                continue;
            }
        };
        for (bi, b) in rec.boxes.iter().enumerate() {
            if b.c == 0 || b.c > labels.len() {
                problems.push(format!("line {lineno}: box {bi} has unknown class {}", b.c));
            }
            let coords = [b.x0, b.y0, b.x1, b.y1];
            if coords.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) || b.x1 < b.x0 || b.y1 < b.y0 {
                problems.push(format!("line {lineno}: box {bi} out of range ({}, {}, {}, {})", b.x0, b.y0, b.x1, b.y1));
            }
        }
        let path = root.join(&rec.image);
        match image::image_dimensions(&path) {
            Ok((w, h)) if (w, h) != (rec.w, rec.h) => {
                problems.push(format!("line {lineno}: image {} is {w}x{h}, header says {}x{}", rec.image, rec.w, rec.h));
            }
            Ok(_) => {}
            Err(_) if !path.exists() => problems.push(format!("line {lineno}: missing image file {}", rec.image)),
            Err(e) => problems.push(format!("line {lineno}: unreadable image {}: {e}", rec.image)),
        }
        frames.push(FrameRecord::from_line(rec));
    }
    let splits_path = root.join(SPLITS_FILE);
    let splits = if splits_path.exists() {
        let text = fs::read_to_string(&splits_path).map_err(io_err(&splits_path))?;
        let s: Splits = serde_json::from_str(&text)
            .map_err(|e| DatasetError::Invalid(vec![format!("{SPLITS_FILE}: {e}")]))?;
        if s.train.iter().chain(&s.val).chain(&s.test).any(|&i| i >= frames.len()) {
            problems.push(format!("{SPLITS_FILE}: frame index out of range"));
        }
        Some(s)
    } else {
        None
    };
    if !problems.is_empty() {
        return Err(DatasetError::Invalid(problems));
    }
    Ok(AnnotatedDataset { root: root.to_path_buf(), labels, frames, splits })
}

/// Partitions frames by whole capture sequences.
///
/// Sequences are shuffled with `seed`, laid end to end, and each goes to the
/// split whose cumulative ratio boundary its midpoint falls under, so every
/// split size is within one sequence of its target.
pub fn split_dataset(frames: &[FrameRecord], ratios: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| *r < 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(DatasetError::Split(format!("ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let key = f.sequence_key(i);
        if !groups.contains_key(&key) {
            order.push(key);
        }
        groups.entry(key).or_default().push(i);
    }
    let wanted = [a, b, c].iter().filter(|r| **r > 0.0).count();
    if order.len() < wanted {
        return Err(DatasetError::Split(format!("{} sequences cannot fill {wanted} splits", order.len())));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total = frames.len() as f64;
    let bounds = [a * total, (a + b) * total];
    let mut splits = Splits::default();
    let mut start = 0.0;
    for key in order {
        let members = &groups[&key];
        let mid = start + members.len() as f64 / 2.0;
        start += members.len() as f64;
        let target = if mid < bounds[0] {
            &mut splits.train
        } else if mid < bounds[1] {
            &mut splits.val
        } else {
            &mut splits.test
        };
        target.extend_from_slice(members);
    }
    for s in [&mut splits.train, &mut splits.val, &mut splits.test] {
        s.sort_unstable();
    }
    Ok(splits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub n_frames: usize,
    pub image_size: u32,
    /// Inclusive shape width range in pixels.
    pub size_range: (u32, u32),
    /// Probability that a shape is drawn in the small-object tier.
    pub small_fraction: f64,
    pub seed: u64,
}

impl ShapesConfig {
    pub fn new(n_frames: usize, image_size: u32, seed: u64) -> Self {
        let s = image_size as f64;
        let min = ((0.08 * s).round() as u32).max(4);
        Self { n_frames, image_size, size_range: (min, (0.45 * s) as u32), small_fraction: 0.4, seed }
    }

    pub fn small_tier_max(&self) -> u32 {
        (SMALL_TIER_FRACTION * self.image_size as f64).floor() as u32
    }
}

pub fn is_small(b: &BBox) -> bool {
    b.width() <= SMALL_TIER_FRACTION + 1e-12
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn class_id(self) -> usize {
        self as usize + 1
    }

    /// Whether the pixel `(px, py)` belongs to a shape of width `s` at `(x, y)`.
    pub fn covers(self, x: u32, y: u32, s: u32, px: u32, py: u32) -> bool {
        let (fx, fy, fs) = (px as f64 + 0.5, py as f64 + 0.5, s as f64);
        let (cx, top) = (x as f64 + fs / 2.0, y as f64);
        match self {
            ShapeKind::Square => px >= x && px < x + s && py >= y && py < y + s,
            ShapeKind::Circle => {
                let (dx, dy) = (fx - cx, fy - (top + fs / 2.0));
                dx * dx + dy * dy <= fs * fs / 4.0
            }
            ShapeKind::Triangle => {
                let depth = fy - top;
                depth >= 0.0 && depth <= fs && (fx - cx).abs() <= depth / 2.0
            }
        }
    }
}

/// Background pixels never exceed this value in any channel.
pub const BACKGROUND_MAX: u8 = 110;
/// Shape colours always have one channel at or above this value.
pub const SHAPE_MIN_PEAK: u8 = 200;

/// One synthetic frame: noisy background with 1-3 non-overlapping shapes.
pub fn render_shapes_frame(cfg: &ShapesConfig, rng: &mut impl Rng) -> (RgbImage, Vec<(usize, BBox)>) {
    let size = cfg.image_size;
    let mut img = RgbImage::from_fn(size, size, |_, _| {
        image::Rgb([rng.gen_range(0..=BACKGROUND_MAX), rng.gen_range(0..=BACKGROUND_MAX), rng.gen_range(0..=BACKGROUND_MAX)])
    });
    let (lo, hi) = cfg.size_range;
    let small_max = cfg.small_tier_max().clamp(lo, hi);
    let count = rng.gen_range(1..=3);
    let mut placed: Vec<(u32, u32, u32, u32)> = Vec::new();
    let mut boxes = Vec::new();
    for _ in 0..count {
        let s = if small_max >= lo && (small_max == hi || rng.gen_bool(cfg.small_fraction)) {
            rng.gen_range(lo..=small_max)
        } else {
            rng.gen_range((small_max + 1).min(hi)..=hi)
        }
        .min(size);
        let kind = ShapeKind::ALL[rng.gen_range(0..3)];
        let mut color = [rng.gen_range(0..=255u8), rng.gen_range(0..=255u8), rng.gen_range(0..=255u8)];
        color[rng.gen_range(0..3)] = rng.gen_range(SHAPE_MIN_PEAK..=255);
        for _attempt in 0..50 {
            let x = rng.gen_range(0..=size - s);
            let y = rng.gen_range(0..=size - s);
            // one-pixel gap between shapes
            let clear = placed.iter().all(|&(px, py, pw, ph)| {
                x + s + 1 <= px || px + pw + 1 <= x || y + s + 1 <= py || py + ph + 1 <= y
            });
            if !clear {
                continue;
            }
            let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
            for py in y..y + s {
                for px in x..x + s {
                    if kind.covers(x, y, s, px, py) {
                        img.put_pixel(px, py, image::Rgb(color));
                        x0 = x0.min(px);
                        y0 = y0.min(py);
                        x1 = x1.max(px + 1);
                        y1 = y1.max(py + 1);
                    }
                }
            }
            placed.push((x, y, s, s));
            let f = size as f64;
            boxes.push((kind.class_id(), BBox::new(x0 as f64 / f, y0 as f64 / f, x1 as f64 / f, y1 as f64 / f)));
            break;
        }
    }
    (img, boxes)
}

/// Generates and writes a synthetic shapes dataset under `out_dir`.
pub fn gen_shapes_dataset(cfg: &ShapesConfig, out_dir: &Path) -> Result<AnnotatedDataset> {
    if cfg.image_size < 32 {
        return Err(DatasetError::Invalid(vec![format!("image_size {} must be >= 32", cfg.image_size)]));
    }
    let (lo, hi) = cfg.size_range;
    if lo == 0 || lo > hi || hi > cfg.image_size {
        return Err(DatasetError::Invalid(vec![format!("size_range {:?} invalid for image {}", cfg.size_range, cfg.image_size)]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let period = 1000.0 / CAPTURE_FPS;
    let mut frames = Vec::with_capacity(cfg.n_frames);
    for i in 0..cfg.n_frames {
        let (img, boxes) = render_shapes_frame(cfg, &mut rng);
        let rel = format!("frames/{i:06}.ppm");
        write_ppm(&out_dir.join(&rel), &img)?;
        frames.push(FrameRecord {
            image_path: rel,
            timestamp_ms: i as f64 * period,
            width: cfg.image_size,
            height: cfg.image_size,
            boxes,
            sequence: Some(i as u64),
        });
    }
    let ds = AnnotatedDataset {
        root: out_dir.to_path_buf(),
        labels: SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
        frames,
        splits: None,
    };
    ds.save()?;
    Ok(ds)
}

/// Adapter from a foreign annotation layout into this format. Implementors
/// write a dataset tree under `out_dir` and return it loaded.
pub trait DatasetConverter {
    fn convert(&self, source: &Path, out_dir: &Path) -> Result<AnnotatedDataset>;
}

/// Checks split disjointness and coverage.
pub fn validate_splits(splits: &Splits, n_frames: usize) -> std::result::Result<(), String> {
    let mut seen = HashSet::new();
    for &i in splits.train.iter().chain(&splits.val).chain(&splits.test) {
        if i >= n_frames || !seen.insert(i) {
            return Err(format!("frame {i} duplicated or out of range"));
        }
    }
    if seen.len() != n_frames {
        return Err(format!("splits cover {} of {n_frames} frames", seen.len()));
    }
    Ok(())
}
