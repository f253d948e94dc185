//! Multibox objective: softmax cross-entropy with hard negative mining plus
//! smooth-L1 box regression, both normalized by the positive count.

use crate::geometry::{encode, match_anchors, Anchor, BBox, VARIANCES};
use crate::graph::{Graph, NodeId};
use crate::tensor::{dim_err, Result, Tensor};

pub const NEG_POS_RATIO: f64 = 3.0;
pub const LOC_WEIGHT: f64 = 1.0;
pub const POS_IOU: f64 = 0.5;

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

fn label_dims(logits_shape: &[usize], labels: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, m, c) = match *logits_shape {
        [n, m, c] => (n, m, c),
        _ => return dim_err("multibox", format!("logits must be [N,M,C], got {logits_shape:?}")),
    };
    if labels.shape() != [n, m] {
        return dim_err("multibox", format!("labels must be [{n},{m}], got {:?}", labels.shape()));
    }
    Ok((n, m, c))
}

fn positives(labels: &Tensor) -> usize {
    labels.data().iter().filter(|&&l| l > 0.0).count()
}

#[derive(Clone, Debug)]
pub struct CeCache {
    probs: Vec<f64>,
    /// Flat `n * M + m` indices contributing to the loss, with their target class.
    selected: Vec<(usize, usize)>,
    norm: f64,
}

/// Picks hard negatives: per image the `floor(ratio * positives)` background
/// anchors with the largest background loss (ties to the lower index), capped
/// by the number of background anchors.
pub fn mine_negatives(bg_loss: &[f64], labels: &[f64], batch: usize, ratio: f64) -> Vec<usize> {
    let m = labels.len() / batch;
    let mut picked = Vec::new();
    for b in 0..batch {
        let range = b * m..(b + 1) * m;
        let pos = labels[range.clone()].iter().filter(|&&l| l > 0.0).count();
        let mut negs: Vec<usize> = range.filter(|&i| labels[i] <= 0.0).collect();
        let take = ((ratio * pos as f64).floor() as usize).min(negs.len());
        negs.sort_by(|&x, &y| bg_loss[y].total_cmp(&bg_loss[x]).then(x.cmp(&y)));
        picked.extend_from_slice(&negs[..take]);
    }
    picked
}

pub(crate) fn softmax_ce_forward(logits: &Tensor, labels: &Tensor, ratio: f64) -> Result<(f64, CeCache)> {
    let (n, m, c) = label_dims(logits.shape(), labels)?;
    let z = logits.data();
    let lab = labels.data();
    if let Some(bad) = lab.iter().find(|&&l| l < 0.0 || l.fract() != 0.0 || l as usize >= c) {
        return dim_err("softmax_ce", format!("label {bad} outside class axis (2) of size {c}"));
    }
    let mut probs = vec![0.0; z.len()];
    let mut lse = vec![0.0; n * m];
    for a in 0..n * m {
        let row = &z[a * c..(a + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (p, &v) in probs[a * c..(a + 1) * c].iter_mut().zip(row) {
            *p = (v - max).exp();
            s += *p;
        }
        for p in &mut probs[a * c..(a + 1) * c] {
            *p /= s;
        }
        lse[a] = max + s.ln();
    }
    let bg_loss: Vec<f64> = (0..n * m).map(|a| lse[a] - z[a * c]).collect();
    let mut selected: Vec<(usize, usize)> =
        (0..n * m).filter(|&a| lab[a] > 0.0).map(|a| (a, lab[a] as usize)).collect();
    selected.extend(mine_negatives(&bg_loss, lab, n, ratio).into_iter().map(|a| (a, 0)));
    let norm = positives(labels).max(1) as f64;
    let loss = selected.iter().map(|&(a, t)| lse[a] - z[a * c + t]).sum::<f64>() / norm;
    Ok((loss, CeCache { probs, selected, norm }))
}

pub(crate) fn softmax_ce_backward(logits: &Tensor, cache: &CeCache, upstream: f64) -> Result<Tensor> {
    let c = logits.shape()[2];
    let mut g = vec![0.0; logits.len()];
    let k = upstream / cache.norm;
    for &(a, t) in &cache.selected {
        for d in 0..c {
            g[a * c + d] = k * cache.probs[a * c + d];
        }
        g[a * c + t] -= k;
    }
    Tensor::new(logits.shape().to_vec(), g)
}

fn check_loc(pred: &Tensor, target: &Tensor, labels: &Tensor) -> Result<()> {
    let (n, m, d) = label_dims(pred.shape(), labels)?;
    if d != 4 || target.shape() != pred.shape() {
        return dim_err("smooth_l1", format!("pred {:?} and target {:?} must be [N,M,4]", pred.shape(), target.shape()));
    }
    debug_assert_eq!(n * m * 4, pred.len());
    Ok(())
}

pub(crate) fn smooth_l1_forward(pred: &Tensor, target: &Tensor, labels: &Tensor, weight: f64) -> Result<f64> {
    check_loc(pred, target, labels)?;
    let (p, t) = (pred.data(), target.data());
    let mut s = 0.0;
    for (a, &l) in labels.data().iter().enumerate() {
        if l > 0.0 {
            s += (0..4).map(|d| smooth_l1(p[a * 4 + d] - t[a * 4 + d])).sum::<f64>();
        }
    }
    Ok(weight * s / positives(labels).max(1) as f64)
}

pub(crate) fn smooth_l1_backward(pred: &Tensor, target: &Tensor, labels: &Tensor, weight: f64, upstream: f64) -> Result<Tensor> {
    check_loc(pred, target, labels)?;
    let (p, t) = (pred.data(), target.data());
    let k = upstream * weight / positives(labels).max(1) as f64;
    let mut g = vec![0.0; p.len()];
    for (a, &l) in labels.data().iter().enumerate() {
        if l > 0.0 {
            for d in 0..4 {
                g[a * 4 + d] = k * smooth_l1_grad(p[a * 4 + d] - t[a * 4 + d]);
            }
        }
    }
    Tensor::new(pred.shape().to_vec(), g)
}

/// Per-anchor training targets for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTargets {
    /// `0` for background, otherwise the class id of the matched box.
    pub labels: Vec<f64>,
    /// Encoded offsets, zero for background anchors.
    pub offsets: Vec<f64>,
}

pub fn build_targets(anchors: &[Anchor], anchor_boxes: &[BBox], gts: &[(usize, BBox)], pos_iou: f64) -> AnchorTargets {
    let boxes: Vec<BBox> = gts.iter().map(|g| g.1).collect();
    let matches = match_anchors(anchor_boxes, &boxes, pos_iou);
    let mut labels = vec![0.0; anchors.len()];
    let mut offsets = vec![0.0; anchors.len() * 4];
    for (i, m) in matches.into_iter().enumerate() {
        let Some(gi) = m else { continue };
        let Ok(t) = encode(&gts[gi].1, &anchors[i], VARIANCES) else { continue };
        labels[i] = gts[gi].0 as f64;
        offsets[i * 4..i * 4 + 4].copy_from_slice(&t);
    }
    AnchorTargets { labels, offsets }
}

/// Loss nodes attached to a graph; the two target inputs are fed per batch.
#[derive(Clone, Copy, Debug)]
pub struct MultiboxNodes {
    pub labels: NodeId,
    pub loc_targets: NodeId,
    pub conf: NodeId,
    pub loc: NodeId,
    pub total: NodeId,
}

pub fn attach_multibox_loss(
    graph: &mut Graph,
    scores: &[NodeId],
    offsets: &[NodeId],
    num_classes: usize,
    neg_pos_ratio: f64,
    loc_weight: f64,
) -> MultiboxNodes {
    let labels = graph.input("labels", false);
    let loc_targets = graph.input("loc_targets", false);
    let logits = graph.linear_heads(scores, num_classes + 1);
    let pred = graph.linear_heads(offsets, 4);
    let conf = graph.softmax_ce(logits, labels, neg_pos_ratio);
    let loc = graph.smooth_l1(pred, loc_targets, labels, loc_weight);
    let total = graph.add(conf, loc);
    MultiboxNodes { labels, loc_targets, conf, loc, total }
}

/// `v <- momentum * v + g + decay * w; w <- w - rate * v`
pub fn sgd_update(weights: &mut [f64], grads: Option<&[f64]>, velocity: &mut [f64], rate: f64, weight_decay: f64, momentum: f64) {
    for i in 0..weights.len() {
        let g = grads.map_or(0.0, |g| g[i]);
        velocity[i] = momentum * velocity[i] + g + weight_decay * weights[i];
        weights[i] -= rate * velocity[i];
    }
}

/// SGD with momentum over every parameter of a graph.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<(NodeId, Vec<f64>)>,
}

impl Sgd {
    pub fn new(graph: &Graph, momentum: f64, weight_decay: f64) -> Self {
        let velocity = graph.params().into_iter().map(|id| (id, vec![0.0; graph.value(id).map_or(0, Tensor::len)])).collect();
        Self { momentum, weight_decay, velocity }
    }

    pub fn step(&mut self, graph: &mut Graph, rate: f64) {
        for (id, v) in &mut self.velocity {
            let (w, g) = graph.param_and_grad_mut(*id);
            let g = g.map(|g| g.data().to_vec());
            sgd_update(w.data_mut(), g.as_deref(), v, rate, self.weight_decay, self.momentum);
        }
    }
}
