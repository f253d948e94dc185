//! Brute-force reference implementations for anchor matching, NMS and AP.

use dunet::geometry::{iou, match_anchors, nms, BBox, Detection};
use dunet::metrics::{average_precision, ApInterp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 1000;

/// Boxes on a coarse 0.1 lattice so equal IoUs and equal scores occur often.
pub fn lattice_box(rng: &mut ChaCha8Rng) -> BBox {
    let x0 = rng.gen_range(0..8) as f64 / 10.0;
    let y0 = rng.gen_range(0..8) as f64 / 10.0;
    let w = rng.gen_range(1..=(10 - (x0 * 10.0) as i32).min(5)) as f64 / 10.0;
    let h = rng.gen_range(1..=(10 - (y0 * 10.0) as i32).min(5)) as f64 / 10.0;
    BBox::new(x0, y0, x0 + w, y0 + h)
}

/// Stage 1 repeatedly takes the globally best unassigned (anchor, gt) pair,
/// scanning anchors then gts so the first maximum found wins ties.
pub fn oracle_match(anchors: &[BBox], gts: &[BBox], threshold: f64) -> Vec<Option<usize>> {
    let mut out = vec![None; anchors.len()];
    let mut gt_done = vec![false; gts.len()];
    for _ in 0..gts.len().min(anchors.len()) {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..anchors.len() {
            if out[a].is_some() {
                continue;
            }
            for g in 0..gts.len() {
                if gt_done[g] {
                    continue;
                }
                let v = iou(&anchors[a], &gts[g]);
                if best.map_or(true, |(_, _, bv)| v > bv) {
                    best = Some((a, g, v));
                }
            }
        }
        let (a, g, _) = best.expect("pairs remain");
        out[a] = Some(g);
        gt_done[g] = true;
    }
    for a in 0..anchors.len() {
        if out[a].is_some() {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(&anchors[a], gt);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v >= threshold {
                out[a] = Some(g);
            }
        }
    }
    out
}

/// Quadratic NMS: repeatedly keep the best remaining box and strike its overlaps.
pub fn oracle_nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if !alive[i] {
                continue;
            }
            best = match best {
                Some(b) if dets[b].score > dets[i].score || (dets[b].score == dets[i].score && dets[b].anchor < dets[i].anchor) => Some(b),
                _ => Some(i),
            };
        }
        let Some(b) = best else { break };
        alive[b] = false;
        kept.push(dets[b]);
        for i in 0..dets.len() {
            if alive[i] && dets[i].class_id == dets[b].class_id && iou(&dets[i].bbox, &dets[b].bbox) > threshold {
                alive[i] = false;
            }
        }
    }
    kept
}

/// Sweeps every distinct score as a threshold and integrates the precision envelope.
pub fn oracle_ap(scored: &[(f64, bool)], num_gt: usize, interp: ApInterp) -> f64 {
    let mut thresholds: Vec<f64> = scored.iter().map(|s| s.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let curve: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let tp = scored.iter().filter(|s| s.0 >= t && s.1).count();
            let fp = scored.iter().filter(|s| s.0 >= t && !s.1).count();
            (tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect();
    let best_from = |k: usize| curve[k..].iter().map(|p| p.1).fold(0.0, f64::max);
    match interp {
        ApInterp::All => {
            let mut ap = 0.0;
            let mut prev = 0.0;
            for (k, p) in curve.iter().enumerate() {
                ap += (p.0 - prev) * best_from(k);
                prev = p.0;
            }
            ap
        }
        ApInterp::ElevenPoint => {
            let mut s = 0.0;
            for r in 0..=10 {
                let r = r as f64 / 10.0;
                s += curve.iter().position(|p| p.0 >= r).map_or(0.0, best_from);
            }
            s / 11.0
        }
    }
}

/// Compares anchor matching with the oracle; returns the first disagreement.
pub fn check_matching(instances: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..instances {
        let anchors: Vec<BBox> = (0..rng.gen_range(1..=10)).map(|_| lattice_box(&mut rng)).collect();
        let gts: Vec<BBox> = (0..rng.gen_range(0..=3)).map(|_| lattice_box(&mut rng)).collect();
        let threshold = [0.3, 0.5, 0.7][case % 3];
        let (fast, slow) = (match_anchors(&anchors, &gts, threshold), oracle_match(&anchors, &gts, threshold));
        if fast != slow {
            return Err(format!("case {case}: {fast:?} vs oracle {slow:?}"));
        }
    }
    Ok(())
}

pub fn check_nms(instances: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for case in 0..instances {
        let dets: Vec<Detection> = (0..rng.gen_range(0..=50))
            .map(|i| Detection {
                bbox: lattice_box(&mut rng),
                class_id: rng.gen_range(1..=3),
                score: rng.gen_range(0..20) as f64 / 20.0,
                anchor: i,
            })
            .collect();
        let threshold = [0.3, 0.45, 0.6][case % 3];
        if nms(&dets, threshold, usize::MAX) != oracle_nms(&dets, threshold) {
            return Err(format!("case {case}: {} boxes at {threshold}", dets.len()));
        }
    }
    Ok(())
}

pub fn check_ap(instances: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for case in 0..instances {
        let scored: Vec<(f64, bool)> = (0..rng.gen_range(0..=20)).map(|_| (rng.gen_range(0..10) as f64 / 10.0, rng.gen_bool(0.5))).collect();
        let tps = scored.iter().filter(|s| s.1).count();
        let num_gt = tps + rng.gen_range(0..=3);
        if num_gt == 0 {
            if average_precision(&scored, 0, ApInterp::All) != 0.0 {
                return Err(format!("case {case}: nonzero AP without ground truth"));
            }
            continue;
        }
        for interp in [ApInterp::All, ApInterp::ElevenPoint] {
            let (fast, slow) = (average_precision(&scored, num_gt, interp), oracle_ap(&scored, num_gt, interp));
            if fast != slow || !(0.0..=1.0).contains(&fast) {
                return Err(format!("case {case} {interp:?}: {fast} vs oracle {slow}"));
            }
        }
    }
    Ok(())
}
