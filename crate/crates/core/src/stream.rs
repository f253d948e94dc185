//! Replay of recorded single-object frame streams against a detector.
//!
//! Frames arrive every `period_ms`. The detector handles one frame at a
//! time and frames arriving while it is busy are dropped (drop-stale), so
//! the next frame processed is the first to arrive once it is free. A frame
//! arriving within `TIME_EPS_MS` of the detector freeing up is not dropped.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{read_image, write_ppm, AnnotatedDataset, DatasetError, CAPTURE_FPS};
use crate::detector::Detector;
use crate::geometry::{iou, BBox};
use crate::tensor::TensorError;

pub const STREAM_FILE: &str = "stream.json";
/// Arrival times within this many milliseconds count as simultaneous.
pub const TIME_EPS_MS: f64 = 1e-9;
pub const STREAM_IOU: f64 = 0.5;

pub fn default_period_ms() -> f64 {
    1000.0 / CAPTURE_FPS
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("stream has no frames")]
    Empty,
    #[error("no frame has exactly one instance of class {0}")]
    NoQualifyingFrames(usize),
    #[error("invalid stream: {0}")]
    Invalid(String),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamFrame {
    /// Relative to the bag directory.
    pub image: String,
    pub ts: f64,
    pub w: u32,
    pub h: u32,
    pub gt: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub period_ms: f64,
    pub category: usize,
    #[serde(default)]
    pub category_name: String,
    pub frames: Vec<StreamFrame>,
}

impl StreamSpec {
    pub fn validate(&self) -> Result<(), StreamError> {
        if self.frames.is_empty() {
            return Err(StreamError::Empty);
        }
        if !(self.period_ms > 0.0) {
            return Err(StreamError::Invalid(format!("period {} must be > 0", self.period_ms)));
        }
        if let Some(w) = self.frames.windows(2).position(|w| w[1].ts <= w[0].ts) {
            return Err(StreamError::Invalid(format!("timestamps not increasing at frame {}", w + 1)));
        }
        Ok(())
    }

    pub fn truth(&self) -> Vec<Vec<(usize, BBox)>> {
        self.frames.iter().map(|f| vec![(self.category, f.gt)]).collect()
    }
}

/// Source of frame pixels for a replay.
pub trait FrameStore {
    fn frame(&self, index: usize) -> Result<RgbImage, StreamError>;
}

/// Frames read from a bag directory on demand.
pub struct BagStore {
    pub dir: PathBuf,
    pub images: Vec<String>,
}

impl BagStore {
    pub fn new(dir: &Path, spec: &StreamSpec) -> Self {
        Self { dir: dir.to_path_buf(), images: spec.frames.iter().map(|f| f.image.clone()).collect() }
    }
}

impl FrameStore for BagStore {
    fn frame(&self, index: usize) -> Result<RgbImage, StreamError> {
        Ok(read_image(&self.dir.join(&self.images[index]))?)
    }
}

/// Blank frames of a fixed size, for detectors that ignore pixels.
pub struct BlankStore {
    pub width: u32,
    pub height: u32,
}

impl FrameStore for BlankStore {
    fn frame(&self, _index: usize) -> Result<RgbImage, StreamError> {
        Ok(RgbImage::new(self.width, self.height))
    }
}

pub fn write_bag(dir: &Path, spec: &StreamSpec) -> Result<(), StreamError> {
    let path = dir.join(STREAM_FILE);
    fs::create_dir_all(dir).map_err(|source| StreamError::Io { path: dir.to_path_buf(), source })?;
    let text = serde_json::to_string_pretty(spec).expect("stream serialize");
    fs::write(&path, text).map_err(|source| StreamError::Io { path, source })
}

pub fn read_bag(dir: &Path) -> Result<StreamSpec, StreamError> {
    let path = dir.join(STREAM_FILE);
    let text = fs::read_to_string(&path).map_err(|source| StreamError::Io { path: path.clone(), source })?;
    let spec: StreamSpec = serde_json::from_str(&text).map_err(|e| StreamError::Invalid(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

/// Builds a bag from every frame holding exactly one instance of
/// `category`, copying the images and restamping them at `period_ms`.
pub fn make_bag(ds: &AnnotatedDataset, category: usize, out_dir: &Path, period_ms: f64) -> Result<StreamSpec, StreamError> {
    let mut frames = Vec::new();
    for f in &ds.frames {
        let mut inst = f.boxes.iter().filter(|b| b.0 == category);
        let (Some(one), None) = (inst.next(), inst.next()) else { continue };
        let img = ds.load_image(f)?;
        let name = format!("frames/{:06}.ppm", frames.len());
        write_ppm(&out_dir.join(&name), &img)?;
        frames.push(StreamFrame { image: name, ts: frames.len() as f64 * period_ms, w: f.width, h: f.height, gt: one.1 });
    }
    if frames.is_empty() {
        return Err(StreamError::NoQualifyingFrames(category));
    }
    let category_name = ds.labels.get(category.wrapping_sub(1)).cloned().unwrap_or_default();
    let spec = StreamSpec { period_ms, category, category_name, frames };
    write_bag(out_dir, &spec)?;
    Ok(spec)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Clock {
    /// Every detector call takes exactly this long.
    Simulated { latency_ms: f64 },
    /// Simulated timeline driven by measured detector time.
    Measured,
    /// Real time: a source thread publishes frames at the stream rate.
    Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub name: String,
    pub category: usize,
    pub frames_total: usize,
    pub frames_processed: usize,
    pub frames_dropped: usize,
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    /// Mean detector latency per processed frame.
    pub wall_time_per_frame_ms: f64,
    pub normalized_time: f64,
    pub recall: f64,
    /// Indices of processed frames, in order.
    #[serde(skip)]
    pub processed: Vec<usize>,
}

impl StreamReport {
    pub fn frames_per_second(&self) -> f64 {
        if self.wall_time_per_frame_ms > 0.0 {
            1000.0 / self.wall_time_per_frame_ms
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Default)]
struct Tally {
    processed: Vec<usize>,
    latency_sum: f64,
    tp: usize,
    fn_: usize,
    fp: usize,
}

impl Tally {
    fn score(&mut self, spec: &StreamSpec, index: usize, dets: &[crate::geometry::Detection], latency_ms: f64) {
        self.processed.push(index);
        self.latency_sum += latency_ms;
        let gt = &spec.frames[index].gt;
        // Detections arrive sorted by score; the first of the category is the top one.
        let top = dets.iter().position(|d| d.class_id == spec.category);
        match top {
            Some(i) if iou(&dets[i].bbox, gt) >= STREAM_IOU => {
                self.tp += 1;
                self.fp += dets.len() - 1;
            }
            _ => {
                self.fn_ += 1;
                self.fp += dets.len();
            }
        }
    }

    fn report(self, name: &str, spec: &StreamSpec) -> StreamReport {
        let n = self.processed.len();
        let mean = if n == 0 { 0.0 } else { self.latency_sum / n as f64 };
        StreamReport {
            name: name.to_string(),
            category: spec.category,
            frames_total: spec.frames.len(),
            frames_processed: n,
            frames_dropped: spec.frames.len() - n,
            tp: self.tp,
            fn_: self.fn_,
            fp: self.fp,
            wall_time_per_frame_ms: mean,
            normalized_time: mean / spec.period_ms,
            recall: if self.tp + self.fn_ == 0 { 0.0 } else { self.tp as f64 / (self.tp + self.fn_) as f64 },
            processed: self.processed,
        }
    }
}

fn sort_dets(mut dets: Vec<crate::geometry::Detection>) -> Vec<crate::geometry::Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.anchor.cmp(&b.anchor)));
    dets
}

/// First frame after `after` that arrives no earlier than `free_at`.
fn next_arrival(spec: &StreamSpec, free_at: f64, after: Option<usize>) -> Option<usize> {
    let start = after.map_or(0, |a| a + 1);
    (start..spec.frames.len()).find(|&i| spec.frames[i].ts >= free_at - TIME_EPS_MS)
}

pub fn replay(
    name: &str,
    spec: &StreamSpec,
    store: &dyn FrameStore,
    detector: &mut dyn Detector,
    clock: Clock,
) -> Result<StreamReport, StreamError> {
    spec.validate()?;
    if let Clock::Simulated { latency_ms } = clock {
        if !(latency_ms >= 0.0) || !latency_ms.is_finite() {
            return Err(StreamError::Invalid(format!("latency {latency_ms} must be finite and >= 0")));
        }
    }
    if clock == Clock::Real {
        return replay_real(name, spec, store, detector);
    }
    let mut tally = Tally::default();
    let mut last: Option<usize> = None;
    let mut free_at = spec.frames[0].ts;
    while let Some(next) = next_arrival(spec, free_at, last) {
        let img = store.frame(next)?;
        let started = Instant::now();
        let dets = sort_dets(detector.detect(next, &img)?);
        let latency = match clock {
            Clock::Simulated { latency_ms } => latency_ms,
            _ => started.elapsed().as_secs_f64() * 1000.0,
        };
        tally.score(spec, next, &dets, latency);
        last = Some(next);
        free_at = spec.frames[next].ts.max(free_at) + latency;
    }
    Ok(tally.report(name, spec))
}

#[derive(Default)]
struct Slot {
    frame: Option<usize>,
    /// The detector is working; frames published now are dropped.
    busy: bool,
    done: bool,
}

/// Single-slot mailbox between the frame clock and the detector.
struct Mailbox {
    slot: Mutex<Slot>,
    ready: Condvar,
}

fn replay_real(name: &str, spec: &StreamSpec, store: &dyn FrameStore, detector: &mut dyn Detector) -> Result<StreamReport, StreamError> {
    let frames: Vec<RgbImage> = (0..spec.frames.len()).map(|i| store.frame(i)).collect::<Result<_, _>>()?;
    let mailbox = Mailbox { slot: Mutex::new(Slot::default()), ready: Condvar::new() };
    let mut tally = Tally::default();
    std::thread::scope(|scope| -> Result<(), StreamError> {
        let mb = &mailbox;
        scope.spawn(move || {
            let start = Instant::now();
            let t0 = spec.frames[0].ts;
            for (i, f) in spec.frames.iter().enumerate() {
                let due = Duration::from_secs_f64(((f.ts - t0) / 1000.0).max(0.0));
                if let Some(wait) = due.checked_sub(start.elapsed()) {
                    std::thread::sleep(wait);
                }
                let mut slot = mb.slot.lock().expect("mailbox");
                if !slot.busy {
                    slot.frame = Some(i);
                    mb.ready.notify_one();
                }
            }
            mb.slot.lock().expect("mailbox").done = true;
            mb.ready.notify_one();
        });
        loop {
            let index = {
                let mut guard = mailbox.slot.lock().expect("mailbox");
                loop {
                    if let Some(i) = guard.frame.take() {
                        guard.busy = true;
                        break Some(i);
                    }
                    if guard.done {
                        break None;
                    }
                    guard = mailbox.ready.wait(guard).expect("mailbox");
                }
            };
            let Some(i) = index else { break };
            let started = Instant::now();
            let dets = sort_dets(detector.detect(i, &frames[i])?);
            tally.score(spec, i, &dets, started.elapsed().as_secs_f64() * 1000.0);
            mailbox.slot.lock().expect("mailbox").busy = false;
        }
        Ok(())
    })?;
    Ok(tally.report(name, spec))
}

/// CSV of runs sorted by normalized time.
pub fn runs_csv(reports: &[StreamReport]) -> String {
    let mut sorted: Vec<&StreamReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.normalized_time.total_cmp(&b.normalized_time));
    let mut s = String::from("name,category,frames_total,frames_processed,frames_dropped,tp,fn,fp,ms_per_frame,normalized_time,recall\n");
    for r in sorted {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6}\n",
            r.name, r.category, r.frames_total, r.frames_processed, r.frames_dropped, r.tp, r.fn_, r.fp,
            r.wall_time_per_frame_ms, r.normalized_time, r.recall
        ));
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Scatter of TP, FN and FP counts against normalized processing time.
pub fn scatter_svg(reports: &[StreamReport]) -> String {
    let (w, h, m) = (480.0, 320.0, 40.0);
    let max_x = reports.iter().map(|r| r.normalized_time).fold(1.0, f64::max) * 1.1;
    let max_y = reports.iter().map(|r| r.tp.max(r.fn_).max(r.fp)).max().unwrap_or(1).max(1) as f64 * 1.1;
    let px = |x: f64| m + x / max_x * (w - 2.0 * m);
    let py = |y: f64| h - m - y / max_y * (h - 2.0 * m);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n");
    s.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{0}\" stroke=\"black\"/>\n",
        h - m,
        w - m
    ));
    s.push_str(&format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">normalized processing time</text>\n", w / 2.0, h - 8.0));
    s.push_str(&format!("<line x1=\"{0}\" y1=\"{m}\" x2=\"{0}\" y2=\"{1}\" stroke=\"gray\" stroke-dasharray=\"4\"/>\n", px(1.0), h - m));
    for r in reports {
        for (field, v, color) in [("tp", r.tp, "green"), ("fn", r.fn_, "orange"), ("fp", r.fp, "red")] {
            s.push_str(&format!(
                "<circle class=\"point\" data-run=\"{}\" data-field=\"{field}\" data-x=\"{}\" data-value=\"{v}\" cx=\"{:.3}\" cy=\"{:.3}\" r=\"4\" fill=\"{color}\"/>\n",
                escape(&r.name),
                r.normalized_time,
                px(r.normalized_time),
                py(v as f64)
            ));
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Per-run bars: processed frames translucent, correct detections solid.
/// Bars are drawn in frame units, so each height equals its field.
pub fn bars_svg(reports: &[StreamReport]) -> String {
    let max = reports.iter().map(|r| r.frames_total).max().unwrap_or(1).max(1) as f64;
    let (bar, gap, plot_h) = (24.0, 12.0, 240.0);
    let width = 60.0 + reports.len() as f64 * (bar + gap);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{}\" viewBox=\"0 0 {width} {}\">\n",
        plot_h + 60.0,
        plot_h + 60.0
    );
    s.push_str(&format!("<g transform=\"translate(40 {}) scale(1 {})\">\n", plot_h + 20.0, -plot_h / max));
    for (i, r) in reports.iter().enumerate() {
        let x = i as f64 * (bar + gap);
        for (field, v, opacity) in [("processed", r.frames_processed, "0.35"), ("tp", r.tp, "1")] {
            s.push_str(&format!(
                "<rect class=\"bar\" data-run=\"{}\" data-field=\"{field}\" x=\"{x}\" y=\"0\" width=\"{bar}\" height=\"{v}\" fill=\"steelblue\" fill-opacity=\"{opacity}\"/>\n",
                escape(&r.name)
            ));
        }
    }
    s.push_str("</g>\n");
    for (i, r) in reports.iter().enumerate() {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            40.0 + i as f64 * (bar + gap) + bar / 2.0,
            plot_h + 40.0,
            escape(&r.name)
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `runs.csv`, `scatter.svg` and `bars.svg` into `dir`.
pub fn compare_runs(reports: &[StreamReport], dir: &Path) -> Result<(), StreamError> {
    if reports.is_empty() {
        return Err(StreamError::Invalid("no reports to compare".into()));
    }
    fs::create_dir_all(dir).map_err(|source| StreamError::Io { path: dir.to_path_buf(), source })?;
    for (file, body) in [("runs.csv", runs_csv(reports)), ("scatter.svg", scatter_svg(reports)), ("bars.svg", bars_svg(reports))] {
        let path = dir.join(file);
        fs::write(&path, body).map_err(|source| StreamError::Io { path, source })?;
    }
    Ok(())
}
