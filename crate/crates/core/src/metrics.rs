//! Detection quality: greedy matching, average precision, mAP and the
//! precision / recall / accuracy counts at a fixed operating point.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox, Detection};

pub const IOU_THRESHOLD: f64 = 0.5;
/// Operating point for the tp/fp/fn counts.
pub const COUNT_SCORE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApInterp {
    /// Area under the full precision envelope.
    #[default]
    All,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    #[serde(rename = "11point")]
    ElevenPoint,
}

impl std::str::FromStr for ApInterp {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(Self::All),
            "11point" => Ok(Self::ElevenPoint),
            _ => Err(format!("unknown interpolation '{s}' (all|11point)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Tp,
    Fp,
    /// Neither counted nor penalized (matched an ignored ground truth).
    Ignored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Per detection, in input order.
    pub outcomes: Vec<Outcome>,
    /// Per ground truth: claimed by some detection.
    pub found: Vec<bool>,
}

fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy same-class matching. Detections are visited by descending score;
/// each claims the highest-IoU unclaimed ground truth with IoU at least
/// `threshold`.
pub fn match_detections(dets: &[(BBox, f64)], gts: &[BBox], threshold: f64) -> MatchResult {
    match_with_ignore(dets, gts, &vec![false; gts.len()], &|_| false, threshold)
}

/// Matching where some ground truths do not count. A detection prefers
/// counted ground truths; one that only overlaps ignored ones, or that is
/// unmatched and `ignore_det` holds for its box, is `Ignored`.
pub fn match_with_ignore(
    dets: &[(BBox, f64)],
    gts: &[BBox],
    ignore_gt: &[bool],
    ignore_det: &dyn Fn(&BBox) -> bool,
    threshold: f64,
) -> MatchResult {
    let scores: Vec<f64> = dets.iter().map(|d| d.1).collect();
    let mut outcomes = vec![Outcome::Fp; dets.len()];
    let mut found = vec![false; gts.len()];
    for di in score_order(&scores) {
        let b = &dets[di].0;
        let mut best: Option<(usize, f64)> = None;
        let mut hits_ignored = false;
        for (gi, g) in gts.iter().enumerate() {
            let v = iou(b, g);
            if v < threshold {
                continue;
            }
            if ignore_gt[gi] {
                hits_ignored = true;
                continue;
            }
            if found[gi] {
                continue;
            }
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        outcomes[di] = match best {
            Some((gi, _)) => {
                found[gi] = true;
                Outcome::Tp
            }
            None if hits_ignored || ignore_det(b) => Outcome::Ignored,
            None => Outcome::Fp,
        };
    }
    MatchResult { outcomes, found }
}

/// `(recall, precision)` at every distinct score threshold, highest first.
/// Tied scores form a single point, so the curve does not depend on how
/// ties are ordered.
pub fn pr_points(scored: &[(f64, bool)], num_gt: usize) -> Vec<(f64, f64)> {
    let scores: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let order = score_order(&scores);
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order.get(k + 1).map_or(true, |&j| scored[j].0 != scored[i].0);
        if last_of_tie {
            let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
            points.push((recall, tp as f64 / (tp + fp) as f64));
        }
    }
    points
}

pub fn average_precision(scored: &[(f64, bool)], num_gt: usize, interp: ApInterp) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let points = pr_points(scored, num_gt);
    let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    match interp {
        ApInterp::All => {
            let mut ap = 0.0;
            let mut prev = 0.0;
            for (p, e) in points.iter().zip(&envelope) {
                ap += (p.0 - prev) * e;
                prev = p.0;
            }
            ap
        }
        ApInterp::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    points.iter().zip(&envelope).find(|(p, _)| p.0 >= t).map_or(0.0, |(_, e)| *e)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Detections and ground truth of one frame (same coordinate frame).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameEval {
    pub detections: Vec<Detection>,
    pub gts: Vec<(usize, BBox)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalThresholds {
    pub iou: f64,
    pub score: f64,
    pub interp: ApInterp,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        Self { iou: IOU_THRESHOLD, score: COUNT_SCORE_THRESHOLD, interp: ApInterp::All }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
    pub fn accuracy(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class_id: usize,
    pub name: String,
    pub ap: f64,
    pub num_gt: usize,
    pub counts: Counts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Classes with at least one ground truth, by class id.
    pub per_class: Vec<ClassResult>,
    pub map: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

impl EvalResult {
    pub fn ap(&self, class_id: usize) -> Option<f64> {
        self.per_class.iter().find(|c| c.class_id == class_id).map(|c| c.ap)
    }

    /// `class,ap,tp,fp,fn`, one row per class then a `mAP` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,ap,tp,fp,fn\n");
        for c in &self.per_class {
            s.push_str(&format!("{},{:.6},{},{},{}\n", c.name, c.ap, c.counts.tp, c.counts.fp, c.counts.fn_));
        }
        s.push_str(&format!("mAP,{:.6},{},{},{}\n", self.map, self.tp, self.fp, self.fn_));
        s
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())
    }
}

/// Full evaluation over frames. `labels[i]` names class `i + 1`.
pub fn evaluate_frames(frames: &[FrameEval], labels: &[String], th: &EvalThresholds) -> EvalResult {
    evaluate_tier(frames, labels, th, &|_| true)
}

/// Evaluation restricted to ground truths for which `in_tier` holds.
/// Out-of-tier ground truths are ignored, as are detections matching them
/// and unmatched detections whose own box is out of tier.
pub fn evaluate_tier(frames: &[FrameEval], labels: &[String], th: &EvalThresholds, in_tier: &dyn Fn(&BBox) -> bool) -> EvalResult {
    let outside = |b: &BBox| !in_tier(b);
    let mut scored: BTreeMap<usize, Vec<(f64, bool)>> = BTreeMap::new();
    let mut num_gt: BTreeMap<usize, usize> = BTreeMap::new();
    let mut counts: BTreeMap<usize, Counts> = BTreeMap::new();
    for cls in 1..=labels.len() {
        for f in frames {
            let gts: Vec<BBox> = f.gts.iter().filter(|g| g.0 == cls).map(|g| g.1).collect();
            let ignore: Vec<bool> = gts.iter().map(outside).collect();
            *num_gt.entry(cls).or_default() += ignore.iter().filter(|i| !**i).count();
            let dets: Vec<(BBox, f64)> = f.detections.iter().filter(|d| d.class_id == cls).map(|d| (d.bbox, d.score)).collect();
            let all = match_with_ignore(&dets, &gts, &ignore, &outside, th.iou);
            let entry = scored.entry(cls).or_default();
            for (d, o) in dets.iter().zip(&all.outcomes) {
                match o {
                    Outcome::Tp => entry.push((d.1, true)),
                    Outcome::Fp => entry.push((d.1, false)),
                    Outcome::Ignored => {}
                }
            }
            // Counts at the operating point use only the confident detections.
            let confident: Vec<(BBox, f64)> = dets.iter().copied().filter(|d| d.1 >= th.score).collect();
            let op = match_with_ignore(&confident, &gts, &ignore, &outside, th.iou);
            let c = counts.entry(cls).or_default();
            c.tp += op.outcomes.iter().filter(|o| **o == Outcome::Tp).count();
            c.fp += op.outcomes.iter().filter(|o| **o == Outcome::Fp).count();
            c.fn_ += op.found.iter().zip(&ignore).filter(|(f, i)| !**f && !**i).count();
        }
    }
    let mut per_class = Vec::new();
    let mut total = Counts::default();
    for cls in 1..=labels.len() {
        let c = counts[&cls];
        total.tp += c.tp;
        total.fp += c.fp;
        total.fn_ += c.fn_;
        let n = num_gt[&cls];
        if n == 0 {
            continue;
        }
        per_class.push(ClassResult {
            class_id: cls,
            name: labels[cls - 1].clone(),
            ap: average_precision(&scored[&cls], n, th.interp),
            num_gt: n,
            counts: c,
        });
    }
    let map = if per_class.is_empty() { 0.0 } else { per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64 };
    EvalResult {
        per_class,
        map,
        tp: total.tp,
        fp: total.fp,
        fn_: total.fn_,
        precision: total.precision(),
        recall: total.recall(),
        accuracy: total.accuracy(),
    }
}
