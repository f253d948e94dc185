//! Capture-time augmentation: spaced frame capture, box-aware image filters,
//! template tracking to carry the label between frames, and a driver that
//! writes the result as a dataset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{read_image, write_ppm, AnnotatedDataset, DatasetError, FrameRecord};
use crate::geometry::BBox;
use crate::stream::{read_bag, StreamError};

pub const MIN_GAP_MS: f64 = 500.0;
pub const SEARCH_FRACTION: f64 = 0.25;
pub const TEMPLATE_KEEP: f64 = 0.9;
pub const LOST_BELOW: f64 = 0.3;
/// Hull corners this close to a whole pixel snap to it before rounding outward.
const SNAP_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("no filters configured")]
    NoFilters,
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("invalid box {0:?}")]
    InvalidBox(PixelBox),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Box in whole pixels, `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn is_degenerate(&self) -> bool {
        self.width() == 0 || self.height() == 0
    }

    pub fn fits(&self, w: u32, h: u32) -> bool {
        !self.is_degenerate() && self.x1 <= w && self.y1 <= h
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn normalized(&self, w: u32, h: u32) -> BBox {
        let (w, h) = (w as f64, h as f64);
        BBox::new(self.x0 as f64 / w, self.y0 as f64 / h, self.x1 as f64 / w, self.y1 as f64 / h)
    }

    pub fn to_bbox(&self) -> BBox {
        BBox::new(self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64)
    }

    fn translated(&self, dx: i64, dy: i64) -> Self {
        let m = |v: u32, d: i64| (v as i64 + d) as u32;
        Self::new(m(self.x0, dx), m(self.y0, dy), m(self.x1, dx), m(self.y1, dy))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    Brightness,
    Contrast,
    Rotation,
    Flip,
    Shadow,
    Background,
    ColorShift,
}

impl FilterKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Brightness => "brightness",
            Self::Contrast => "contrast",
            Self::Rotation => "rotation",
            Self::Flip => "flip",
            Self::Shadow => "shadow",
            Self::Background => "background",
            Self::ColorShift => "color-shift",
        }
    }

    /// Sampling range used when a spec gives none.
    pub fn default_range(self) -> (f64, f64) {
        match self {
            Self::Brightness | Self::Contrast => (0.6, 1.4),
            Self::Rotation => (-15.0, 15.0),
            Self::Shadow => (0.4, 0.8),
            Self::ColorShift => (-30.0, 30.0),
            Self::Flip | Self::Background => (0.0, 0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fill {
    Flat([u8; 3]),
    /// Two-colour checkerboard with square cells.
    Checker { a: [u8; 3], b: [u8; 3], cell: u32 },
}

impl Default for Fill {
    fn default() -> Self {
        Fill::Checker { a: [40, 40, 40], b: [90, 90, 90], cell: 8 }
    }
}

impl Fill {
    fn at(&self, x: u32, y: u32) -> [u8; 3] {
        match self {
            Fill::Flat(c) => *c,
            Fill::Checker { a, b, cell } => {
                let c = (*cell).max(1);
                if (x / c + y / c) % 2 == 0 {
                    *a
                } else {
                    *b
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fill: Option<Fill>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub weight: f64,
    #[serde(default)]
    pub params: FilterParams,
}

impl FilterSpec {
    pub fn new(kind: FilterKind, weight: f64) -> Self {
        Self { kind, weight, params: FilterParams::default() }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.weight > 0.0) || !self.weight.is_finite() {
            return Err(AugmentError::InvalidFilter(format!("{} weight {} must be > 0", self.kind.name(), self.weight)));
        }
        let (lo, hi) = self.range();
        if !(lo <= hi) {
            return Err(AugmentError::InvalidFilter(format!("{} range ({lo}, {hi})", self.kind.name())));
        }
        Ok(())
    }

    pub fn range(&self) -> (f64, f64) {
        self.params.range.unwrap_or(self.kind.default_range())
    }

    /// Draws concrete filter parameters.
    pub fn sample(&self, rng: &mut impl Rng, width: u32, height: u32) -> FilterOp {
        let (lo, hi) = self.range();
        let draw = |rng: &mut ChaCha8Rng| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let mut local = ChaCha8Rng::seed_from_u64(rng.gen());
        match self.kind {
            FilterKind::Brightness => FilterOp::Brightness { gain: draw(&mut local) },
            FilterKind::Contrast => FilterOp::Contrast { gain: draw(&mut local) },
            FilterKind::Rotation => FilterOp::Rotation { degrees: draw(&mut local) },
            FilterKind::Flip => FilterOp::Flip,
            FilterKind::Shadow => {
                let gain = draw(&mut local);
                let angle = local.gen_range(0.0..std::f64::consts::TAU);
                let offset = local.gen_range(-0.25..0.25) * width.min(height) as f64;
                FilterOp::Shadow { gain, angle, offset }
            }
            FilterKind::Background => FilterOp::Background { fill: self.params.fill.clone().unwrap_or_default() },
            FilterKind::ColorShift => {
                let shift = [draw(&mut local), draw(&mut local), draw(&mut local)].map(|v| v.round() as i16);
                FilterOp::ColorShift { shift }
            }
        }
    }
}

/// A filter with every parameter fixed.
#[derive(Clone, Debug, PartialEq)]
pub enum FilterOp {
    Brightness { gain: f64 },
    /// Scales deviation from the frame's mean intensity.
    Contrast { gain: f64 },
    /// Counter-clockwise about the frame center.
    Rotation { degrees: f64 },
    Flip,
    /// Multiplies the half-plane `(p - c) . (cos a, sin a) > offset` by `gain`.
    Shadow { gain: f64, angle: f64, offset: f64 },
    Background { fill: Fill },
    ColorShift { shift: [i16; 3] },
}

impl FilterOp {
    pub fn kind(&self) -> FilterKind {
        match self {
            Self::Brightness { .. } => FilterKind::Brightness,
            Self::Contrast { .. } => FilterKind::Contrast,
            Self::Rotation { .. } => FilterKind::Rotation,
            Self::Flip => FilterKind::Flip,
            Self::Shadow { .. } => FilterKind::Shadow,
            Self::Background { .. } => FilterKind::Background,
            Self::ColorShift { .. } => FilterKind::ColorShift,
        }
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn map_pixels(img: &RgbImage, mut f: impl FnMut(u32, u32, [u8; 3]) -> [u8; 3]) -> RgbImage {
    let mut out = img.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        *p = Rgb(f(x, y, p.0));
    }
    out
}

/// Rotates `(x, y)` about `(cx, cy)`, counter-clockwise as seen on screen.
fn rotate_point(x: f64, y: f64, cx: f64, cy: f64, cos: f64, sin: f64) -> (f64, f64) {
    let (dx, dy) = (x - cx, y - cy);
    (cx + dx * cos + dy * sin, cy - dx * sin + dy * cos)
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP_EPS {
        r
    } else {
        v
    }
}

/// Axis-aligned hull of the rotated box corners, rounded outward to whole
/// pixels and clamped to the frame.
pub fn rotated_hull(b: &PixelBox, w: u32, h: u32, degrees: f64) -> PixelBox {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let corners = [(b.x0, b.y0), (b.x1, b.y0), (b.x0, b.y1), (b.x1, b.y1)]
        .map(|(x, y)| rotate_point(x as f64, y as f64, cx, cy, cos, sin));
    let xs = corners.map(|c| c.0);
    let ys = corners.map(|c| c.1);
    let lo = |v: [f64; 4], max: u32| snap(v.iter().copied().fold(f64::INFINITY, f64::min)).floor().clamp(0.0, max as f64) as u32;
    let hi = |v: [f64; 4], max: u32| snap(v.iter().copied().fold(f64::NEG_INFINITY, f64::max)).ceil().clamp(0.0, max as f64) as u32;
    PixelBox::new(lo(xs, w), lo(ys, h), hi(xs, w), hi(ys, h))
}

fn rotate_image(img: &RgbImage, degrees: f64) -> RgbImage {
    let (w, h) = img.dimensions();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = RgbImage::new(w, h);
    for (x, y, p) in out.enumerate_pixels_mut() {
        // Inverse rotation of the output pixel center, nearest source pixel.
        let (sx, sy) = rotate_point(x as f64 + 0.5, y as f64 + 0.5, cx, cy, cos, -sin);
        let (fx, fy) = (sx.floor(), sy.floor());
        if fx >= 0.0 && fy >= 0.0 && fx < w as f64 && fy < h as f64 {
            *p = *img.get_pixel(fx as u32, fy as u32);
        }
    }
    out
}

/// Applies a filter to a frame and its box. `None` means the transformed
/// box became empty and the sample should be skipped.
pub fn apply_filter(img: &RgbImage, b: &PixelBox, op: &FilterOp) -> Option<(RgbImage, PixelBox)> {
    let (w, h) = img.dimensions();
    let out = match op {
        FilterOp::Brightness { gain } => map_pixels(img, |_, _, p| p.map(|v| clamp_u8(v as f64 * gain))),
        FilterOp::Contrast { gain } => {
            let n = (w as f64) * (h as f64) * 3.0;
            let mean = img.as_raw().iter().map(|&v| v as f64).sum::<f64>() / n;
            map_pixels(img, |_, _, p| p.map(|v| clamp_u8((v as f64 - mean) * gain + mean)))
        }
        FilterOp::ColorShift { shift } => {
            map_pixels(img, |_, _, p| [0, 1, 2].map(|c| clamp_u8(p[c] as f64 + shift[c] as f64)))
        }
        FilterOp::Shadow { gain, angle, offset } => {
            let (s, c) = angle.sin_cos();
            let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
            map_pixels(img, |x, y, p| {
                let d = (x as f64 + 0.5 - cx) * c + (y as f64 + 0.5 - cy) * s;
                if d > *offset {
                    p.map(|v| clamp_u8(v as f64 * gain))
                } else {
                    p
                }
            })
        }
        FilterOp::Background { fill } => map_pixels(img, |x, y, p| if b.contains(x, y) { p } else { fill.at(x, y) }),
        FilterOp::Flip => {
            let flipped = image::imageops::flip_horizontal(img);
            return Some((flipped, PixelBox::new(w - b.x1, b.y0, w - b.x0, b.y1)));
        }
        FilterOp::Rotation { degrees } => {
            let hull = rotated_hull(b, w, h, *degrees);
            if hull.is_degenerate() {
                return None;
            }
            return Some((rotate_image(img, *degrees), hull));
        }
    };
    Some((out, *b))
}

/// Smooth weighted round-robin over filter indices.
#[derive(Clone, Debug)]
pub struct RoundRobin {
    weights: Vec<f64>,
    current: Vec<f64>,
}

impl RoundRobin {
    pub fn new(filters: &[FilterSpec]) -> Result<Self, AugmentError> {
        if filters.is_empty() {
            return Err(AugmentError::NoFilters);
        }
        for f in filters {
            f.validate()?;
        }
        let total: f64 = filters.iter().map(|f| f.weight).sum();
        let weights: Vec<f64> = filters.iter().map(|f| f.weight / total).collect();
        Ok(Self { current: vec![0.0; weights.len()], weights })
    }

    pub fn next_index(&mut self) -> usize {
        for (c, w) in self.current.iter_mut().zip(&self.weights) {
            *c += w;
        }
        let mut best = 0;
        for i in 1..self.current.len() {
            if self.current[i] > self.current[best] + 1e-12 {
                best = i;
            }
        }
        self.current[best] -= 1.0;
        best
    }
}

/// Indices of frames to capture: the first frame, then each first frame at
/// least `min_gap_ms` after the previous capture.
pub fn capture_indices(timestamps: &[f64], min_gap_ms: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut last: Option<f64> = None;
    for (i, &t) in timestamps.iter().enumerate() {
        if last.map_or(true, |l| t - l >= min_gap_ms) {
            out.push(i);
            last = Some(t);
        }
    }
    out
}

/// `(frame index, filter index)` pairs; each captured frame gets one filter.
pub fn schedule_captures(timestamps: &[f64], filters: &[FilterSpec], min_gap_ms: f64) -> Result<Vec<(usize, usize)>, AugmentError> {
    let mut rr = RoundRobin::new(filters)?;
    Ok(capture_indices(timestamps, min_gap_ms).into_iter().map(|i| (i, rr.next_index())).collect())
}

/// Grayscale intensities of a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl Gray {
    pub fn from_rgb(img: &RgbImage) -> Self {
        let data = img.pixels().map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0).collect();
        Self { width: img.width(), height: img.height(), data }
    }

    fn patch(&self, b: &PixelBox) -> Vec<f64> {
        let mut out = Vec::with_capacity((b.width() * b.height()) as usize);
        for y in b.y0..b.y1 {
            let row = (y * self.width) as usize;
            out.extend_from_slice(&self.data[row + b.x0 as usize..row + b.x1 as usize]);
        }
        out
    }
}

/// Normalized cross-correlation of two equal-size patches. A flat patch has
/// no defined correlation and scores 0.
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        num += da * db;
        va += da * da;
        vb += db * db;
    }
    let den = (va * vb).sqrt();
    if den <= 1e-12 * n {
        0.0
    } else {
        (num / den).clamp(-1.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    pub template: Vec<f64>,
    pub bbox: PixelBox,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrackOutcome {
    Tracking(TrackState),
    Lost { confidence: f64, last: PixelBox },
}

impl TrackState {
    pub fn new(frame: &Gray, bbox: PixelBox) -> Result<Self, AugmentError> {
        if !bbox.fits(frame.width, frame.height) {
            return Err(AugmentError::InvalidBox(bbox));
        }
        Ok(Self { template: frame.patch(&bbox), bbox, confidence: 1.0 })
    }

    /// Exhaustive NCC search within ±25% of the box size.
    pub fn update(&self, frame: &Gray) -> TrackOutcome {
        let b = self.bbox;
        let rx = (b.width() as f64 * SEARCH_FRACTION).round() as i64;
        let ry = (b.height() as f64 * SEARCH_FRACTION).round() as i64;
        let mut best: Option<(f64, i64, i64)> = None;
        for dy in -ry..=ry {
            for dx in -rx..=rx {
                let (x0, y0) = (b.x0 as i64 + dx, b.y0 as i64 + dy);
                if x0 < 0 || y0 < 0 || x0 + b.width() as i64 > frame.width as i64 || y0 + b.height() as i64 > frame.height as i64 {
                    continue;
                }
                let cand = b.translated(dx, dy);
                let score = ncc(&self.template, &frame.patch(&cand));
                // Prefer the higher score, then the smaller move.
                let better = match best {
                    None => true,
                    Some((s, bx, by)) => score > s || (score == s && dx.abs() + dy.abs() < bx.abs() + by.abs()),
                };
                if better {
                    best = Some((score, dx, dy));
                }
            }
        }
        let Some((score, dx, dy)) = best else {
            return TrackOutcome::Lost { confidence: 0.0, last: b };
        };
        if score < LOST_BELOW {
            return TrackOutcome::Lost { confidence: score, last: b };
        }
        let bbox = b.translated(dx, dy);
        let fresh = frame.patch(&bbox);
        let template = self.template.iter().zip(&fresh).map(|(o, n)| TEMPLATE_KEEP * o + (1.0 - TEMPLATE_KEEP) * n).collect();
        TrackOutcome::Tracking(TrackState { template, bbox, confidence: score })
    }
}

/// Ordered frames with capture timestamps.
pub trait FrameSource {
    fn len(&self) -> usize;
    fn timestamp_ms(&self, index: usize) -> f64;
    fn frame(&self, index: usize) -> Result<RgbImage, AugmentError>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Numbered PPM or PNG files in a directory, sorted by name, at a fixed rate.
pub struct DirSource {
    pub paths: Vec<PathBuf>,
    pub period_ms: f64,
}

impl DirSource {
    pub fn open(dir: &Path, period_ms: f64) -> Result<Self, AugmentError> {
        let entries = std::fs::read_dir(dir).map_err(|source| AugmentError::Io { path: dir.to_path_buf(), source })?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "png")))
            .collect();
        paths.sort();
        Ok(Self { paths, period_ms })
    }
}

impl FrameSource for DirSource {
    fn len(&self) -> usize {
        self.paths.len()
    }
    fn timestamp_ms(&self, index: usize) -> f64 {
        index as f64 * self.period_ms
    }
    fn frame(&self, index: usize) -> Result<RgbImage, AugmentError> {
        Ok(read_image(&self.paths[index])?)
    }
}

/// Frames of a recorded stream, at their recorded timestamps.
pub struct BagSource {
    pub dir: PathBuf,
    pub spec: crate::stream::StreamSpec,
}

impl BagSource {
    pub fn open(dir: &Path) -> Result<Self, AugmentError> {
        Ok(Self { dir: dir.to_path_buf(), spec: read_bag(dir)? })
    }
}

impl FrameSource for BagSource {
    fn len(&self) -> usize {
        self.spec.frames.len()
    }
    fn timestamp_ms(&self, index: usize) -> f64 {
        self.spec.frames[index].ts
    }
    fn frame(&self, index: usize) -> Result<RgbImage, AugmentError> {
        Ok(read_image(&self.dir.join(&self.spec.frames[index].image))?)
    }
}

/// A textured square sliding across a background, bouncing off the edges.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslatingSquare {
    pub width: u32,
    pub height: u32,
    pub size: u32,
    pub start: (u32, u32),
    pub velocity: (i64, i64),
    pub frames: usize,
    pub period_ms: f64,
    /// Replaces the scene with uniform noise from this frame on.
    pub noise_from: Option<usize>,
    pub seed: u64,
}

impl TranslatingSquare {
    pub fn new(frames: usize, seed: u64) -> Self {
        Self {
            width: 160,
            height: 120,
            size: 24,
            start: (20, 30),
            velocity: (3, 2),
            frames,
            period_ms: 33.3,
            noise_from: None,
            seed,
        }
    }

    fn axis(start: u32, v: i64, span: u32, t: usize) -> u32 {
        // Reflect the unbounded position into [0, span].
        if span == 0 {
            return 0;
        }
        let period = 2 * span as i64;
        let p = (start as i64 + v * t as i64).rem_euclid(period);
        (if p > span as i64 { period - p } else { p }) as u32
    }

    pub fn truth(&self, index: usize) -> PixelBox {
        let x = Self::axis(self.start.0, self.velocity.0, self.width - self.size, index);
        let y = Self::axis(self.start.1, self.velocity.1, self.height - self.size, index);
        PixelBox::new(x, y, x + self.size, y + self.size)
    }

    fn texture(&self) -> Vec<[u8; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.size * self.size).map(|_| [rng.gen_range(120..=255), rng.gen_range(0..=255), rng.gen_range(0..=120)]).collect()
    }
}

impl FrameSource for TranslatingSquare {
    fn len(&self) -> usize {
        self.frames
    }
    fn timestamp_ms(&self, index: usize) -> f64 {
        index as f64 * self.period_ms
    }
    fn frame(&self, index: usize) -> Result<RgbImage, AugmentError> {
        if self.noise_from.is_some_and(|n| index >= n) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            return Ok(RgbImage::from_fn(self.width, self.height, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()])));
        }
        let tex = self.texture();
        let b = self.truth(index);
        Ok(RgbImage::from_fn(self.width, self.height, |x, y| {
            if b.contains(x, y) {
                Rgb(tex[((y - b.y0) * self.size + (x - b.x0)) as usize])
            } else {
                Rgb([30, 60, 30])
            }
        }))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentReport {
    pub dataset: AnnotatedDataset,
    /// Samples written per filter name.
    pub counts: BTreeMap<String, usize>,
    /// Captures dropped because the filtered box was empty.
    pub skipped: usize,
    /// Frame at which tracking was lost, if it was.
    pub lost_at: Option<usize>,
    /// Source frame index of every written sample.
    pub source_frames: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    pub filters: Vec<FilterSpec>,
    pub min_gap_ms: f64,
    pub label: String,
    pub sequence: u64,
    pub seed: u64,
}

/// Tracks the object through the source from `initial`, captures spaced
/// frames, filters each and writes them as a one-class dataset.
pub fn build_dataset(source: &dyn FrameSource, initial: PixelBox, cfg: &AugmentConfig, out_dir: &Path) -> Result<AugmentReport, AugmentError> {
    if cfg.filters.is_empty() {
        return Err(AugmentError::NoFilters);
    }
    let mut rr = RoundRobin::new(&cfg.filters)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut frames = Vec::new();
    let mut counts: BTreeMap<String, usize> = cfg.filters.iter().map(|f| (f.kind.name().to_string(), 0)).collect();
    let mut skipped = 0;
    let mut lost_at = None;
    let mut source_frames = Vec::new();
    let mut state: Option<TrackState> = None;
    let mut last_capture: Option<f64> = None;
    for i in 0..source.len() {
        let img = source.frame(i)?;
        let gray = Gray::from_rgb(&img);
        let current = match state.take() {
            None => TrackState::new(&gray, initial)?,
            Some(s) => match s.update(&gray) {
                TrackOutcome::Tracking(next) => next,
                TrackOutcome::Lost { confidence, .. } => {
                    log::warn!("tracking lost at frame {i} (confidence {confidence:.3}); keeping {} samples", frames.len());
                    lost_at = Some(i);
                    break;
                }
            },
        };
        let t = source.timestamp_ms(i);
        if last_capture.map_or(true, |l| t - l >= cfg.min_gap_ms) {
            last_capture = Some(t);
            let spec = &cfg.filters[rr.next_index()];
            let op = spec.sample(&mut rng, img.width(), img.height());
            match apply_filter(&img, &current.bbox, &op) {
                Some((out, b)) => {
                    let name = format!("frames/{:06}.ppm", frames.len());
                    write_ppm(&out_dir.join(&name), &out)?;
                    frames.push(FrameRecord {
                        image_path: name,
                        timestamp_ms: t,
                        width: out.width(),
                        height: out.height(),
                        boxes: vec![(1, b.normalized(out.width(), out.height()))],
                        sequence: Some(cfg.sequence),
                    });
                    source_frames.push(i);
                    *counts.entry(spec.kind.name().to_string()).or_default() += 1;
                }
                None => skipped += 1,
            }
        }
        state = Some(current);
    }
    let dataset = AnnotatedDataset { root: out_dir.to_path_buf(), labels: vec![cfg.label.clone()], frames, splits: None };
    dataset.save()?;
    for (k, v) in &counts {
        log::info!("filter {k}: {v} samples");
    }
    Ok(AugmentReport { dataset, counts, skipped, lost_at, source_frames })
}
