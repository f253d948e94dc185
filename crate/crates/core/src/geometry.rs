//! Anchors, overlap, ground-truth matching, offset coding and suppression.
//!
//! All boxes live in normalized image coordinates. Anchor order is
//! head-major (finest grid first), then row-major cell, then anchor index,
//! which is the same order [`crate::tensor::linear_heads`] produces.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::DunetConfig;
use crate::tensor::{dim_err, Result as TensorResult, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("cannot encode box with non-positive size {w}x{h}")]
    DegenerateBox { w: f64, h: f64 },
}

/// Axis-aligned rectangle `(xmin, ymin)-(xmax, ymax)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    pub const fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self { xmin, ymin, xmax, ymax }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.xmin <= self.xmax && self.ymin <= self.ymax
    }

    pub fn clipped(&self) -> Self {
        Self {
            xmin: self.xmin.clamp(0.0, 1.0),
            ymin: self.ymin.clamp(0.0, 1.0),
            xmax: self.xmax.clamp(0.0, 1.0),
            ymax: self.ymax.clamp(0.0, 1.0),
        }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0)
    }
}

/// Reference box in center form, tied to one cell of one prediction head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub head: usize,
    pub cell: usize,
}

impl Anchor {
    pub fn to_bbox(&self) -> BBox {
        BBox::new(self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Foreground class in `1..=K`.
    pub class_id: usize,
    pub score: f64,
    /// Index of the anchor that produced the detection; orders ties.
    pub anchor: usize,
}

pub const VARIANCES: (f64, f64) = (0.1, 0.2);
pub const MIN_SCALE: f64 = 0.1;
pub const MAX_SCALE: f64 = 0.8;
/// Scale past the coarsest head, used for its extra square anchor.
pub const LAST_EXTRA_SCALE: f64 = 0.95;

/// Per-head anchor scales, linearly spaced from `MIN_SCALE` to `MAX_SCALE`.
pub fn head_scales(heads: usize) -> Vec<f64> {
    if heads == 1 {
        return vec![MIN_SCALE];
    }
    (0..heads).map(|h| MIN_SCALE + (MAX_SCALE - MIN_SCALE) * h as f64 / (heads - 1) as f64).collect()
}

/// `(w, h)` of each anchor in a cell for the given head.
///
/// The first four shapes are ratios 1, 2 and 1/2 at the head scale plus a
/// square at the geometric mean with the next scale; ratios 3 and 1/3 follow
/// for configurations with more anchors per cell.
pub fn cell_anchor_shapes(scale: f64, next_scale: f64, count: usize) -> Vec<(f64, f64)> {
    let r2 = 2f64.sqrt();
    let r3 = 3f64.sqrt();
    let extra = (scale * next_scale).sqrt();
    [
        (scale, scale),
        (scale * r2, scale / r2),
        (scale / r2, scale * r2),
        (extra, extra),
        (scale * r3, scale / r3),
        (scale / r3, scale * r3),
    ]
    .into_iter()
    .take(count)
    .collect()
}

pub fn generate_anchors(cfg: &DunetConfig) -> Vec<Anchor> {
    let grids = cfg.grid_sizes();
    let scales = head_scales(grids.len());
    let mut anchors = Vec::with_capacity(cfg.total_anchors());
    for (head, &g) in grids.iter().enumerate() {
        let next = scales.get(head + 1).copied().unwrap_or(LAST_EXTRA_SCALE);
        let shapes = cell_anchor_shapes(scales[head], next, cfg.anchors_per_cell);
        for y in 0..g {
            for x in 0..g {
                let (cx, cy) = ((x as f64 + 0.5) / g as f64, (y as f64 + 0.5) / g as f64);
                for &(w, h) in &shapes {
                    anchors.push(Anchor { cx, cy, w, h, head, cell: y * g + x });
                }
            }
        }
    }
    anchors
}

/// Intersection over union; zero when either box has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (aa, ba) = (a.area(), b.area());
    if aa <= 0.0 || ba <= 0.0 {
        return 0.0;
    }
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (aa + ba - inter)).clamp(0.0, 1.0)
}

/// Assigns each anchor to a ground-truth index or to background (`None`).
///
/// First every ground truth claims its best anchor (greedy bipartite order
/// by IoU, ties to the lower anchor then lower gt index), then every other
/// anchor whose best IoU reaches `pos_threshold` becomes positive for that gt.
pub fn match_anchors(anchors: &[BBox], gts: &[BBox], pos_threshold: f64) -> Vec<Option<usize>> {
    let mut labels = vec![None; anchors.len()];
    if gts.is_empty() || anchors.is_empty() {
        return labels;
    }
    let overlaps: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| iou(a, g)).collect()).collect();
    // Per-gt candidate anchors ordered by descending IoU, then ascending index.
    let mut order: Vec<(usize, usize)> = Vec::with_capacity(anchors.len() * gts.len());
    for (ai, row) in overlaps.iter().enumerate() {
        for gi in 0..row.len() {
            order.push((ai, gi));
        }
    }
    order.sort_by(|&(a1, g1), &(a2, g2)| {
        overlaps[a2][g2].total_cmp(&overlaps[a1][g1]).then(a1.cmp(&a2)).then(g1.cmp(&g2))
    });
    let mut gt_done = vec![false; gts.len()];
    let mut remaining = gts.len();
    for (ai, gi) in order {
        if remaining == 0 {
            break;
        }
        if gt_done[gi] || labels[ai].is_some() {
            continue;
        }
        labels[ai] = Some(gi);
        gt_done[gi] = true;
        remaining -= 1;
    }
    for (ai, row) in overlaps.iter().enumerate() {
        if labels[ai].is_some() {
            continue;
        }
        let mut best = 0;
        for gi in 1..row.len() {
            if row[gi] > row[best] {
                best = gi;
            }
        }
        if row[best] >= pos_threshold {
            labels[ai] = Some(best);
        }
    }
    labels
}

pub fn encode(gt: &BBox, anchor: &Anchor, variances: (f64, f64)) -> Result<[f64; 4], GeometryError> {
    let (gw, gh) = (gt.width(), gt.height());
    if gw <= 0.0 || gh <= 0.0 {
        return Err(GeometryError::DegenerateBox { w: gw, h: gh });
    }
    let (gcx, gcy) = gt.center();
    Ok([
        (gcx - anchor.cx) / (anchor.w * variances.0),
        (gcy - anchor.cy) / (anchor.h * variances.0),
        (gw / anchor.w).ln() / variances.1,
        (gh / anchor.h).ln() / variances.1,
    ])
}

pub fn decode(offsets: &[f64], anchor: &Anchor, variances: (f64, f64)) -> BBox {
    let cx = anchor.cx + offsets[0] * variances.0 * anchor.w;
    let cy = anchor.cy + offsets[1] * variances.0 * anchor.h;
    let w = anchor.w * (offsets[2] * variances.1).exp();
    let h = anchor.h * (offsets[3] * variances.1).exp();
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

fn by_score_then_anchor(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.anchor.cmp(&b.anchor))
}

/// Greedy per-class non-maximum suppression.
///
/// Output is sorted by descending score (ties by anchor index) and truncated
/// to `max_out`.
pub fn nms(detections: &[Detection], iou_threshold: f64, max_out: usize) -> Vec<Detection> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(by_score_then_anchor);
    let mut suppressed = vec![false; sorted.len()];
    let mut kept = Vec::new();
    for i in 0..sorted.len() {
        if suppressed[i] {
            continue;
        }
        kept.push(sorted[i]);
        if kept.len() == max_out {
            break;
        }
        for j in i + 1..sorted.len() {
            if !suppressed[j]
                && sorted[j].class_id == sorted[i].class_id
                && iou(&sorted[i].bbox, &sorted[j].bbox) > iou_threshold
            {
                suppressed[j] = true;
            }
        }
    }
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl DecodeParams {
    pub const EVAL: Self = Self { score_threshold: 0.01, nms_threshold: 0.45, max_detections: 100 };
    pub const STREAM: Self = Self { score_threshold: 0.5, nms_threshold: 0.45, max_detections: 100 };
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self::EVAL
    }
}

/// Raw output of one prediction head for a single image.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub head: usize,
    /// `[1, A*(K+1), g, g]`
    pub scores: Tensor,
    /// `[1, A*4, g, g]`
    pub offsets: Tensor,
}

/// Turns head outputs into scored, suppressed detections.
pub fn decode_detections(
    heads: &[HeadOutput],
    anchors: &[Anchor],
    num_classes: usize,
    params: &DecodeParams,
) -> TensorResult<Vec<Detection>> {
    let depth = num_classes + 1;
    let mut head_offset = Vec::new();
    let mut start = 0;
    let max_head = anchors.iter().map(|a| a.head).max().map_or(0, |h| h + 1);
    for h in 0..max_head {
        head_offset.push(start);
        start += anchors.iter().filter(|a| a.head == h).count();
    }
    let mut candidates = Vec::new();
    let mut probs = vec![0.0; depth];
    for out in heads {
        let (n, c, gh, gw) = out.scores.dims4("decode_detections")?;
        let (on, oc, ogh, ogw) = out.offsets.dims4("decode_detections")?;
        if out.head >= max_head || n != 1 || on != 1 || c % depth != 0 || (gh, gw) != (ogh, ogw) {
            return dim_err("decode_detections", format!("head {} has incompatible shapes", out.head));
        }
        let a = c / depth;
        if oc != a * 4 || head_offset[out.head] + a * gh * gw > anchors.len() {
            return dim_err("decode_detections", format!("head {} offset channels {oc} != {}", out.head, a * 4));
        }
        let plane = gh * gw;
        let (s, o) = (out.scores.data(), out.offsets.data());
        for cell in 0..plane {
            for ai in 0..a {
                let idx = head_offset[out.head] + cell * a + ai;
                let mut max = f64::NEG_INFINITY;
                for (d, p) in probs.iter_mut().enumerate() {
                    *p = s[(ai * depth + d) * plane + cell];
                    max = max.max(*p);
                }
                let mut z = 0.0;
                for p in probs.iter_mut() {
                    *p = (*p - max).exp();
                    z += *p;
                }
                let mut bbox = None;
                for (cls, &p) in probs.iter().enumerate().skip(1) {
                    let score = p / z;
                    if score < params.score_threshold {
                        continue;
                    }
                    let b = *bbox.get_or_insert_with(|| {
                        let off: Vec<f64> = (0..4).map(|d| o[(ai * 4 + d) * plane + cell]).collect();
                        decode(&off, &anchors[idx], VARIANCES).clipped()
                    });
                    candidates.push(Detection { bbox: b, class_id: cls, score, anchor: idx });
                }
            }
        }
    }
    Ok(nms(&candidates, params.nms_threshold, params.max_detections))
}
