//! From-scratch minibatch training.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{save_model, CheckpointError};
use crate::dataset::{AnnotatedDataset, DatasetError, FrameRecord};
use crate::geometry::{generate_anchors, Anchor, BBox};
use crate::loss::{attach_multibox_loss, build_targets, MultiboxNodes, Sgd, LOC_WEIGHT, NEG_POS_RATIO, POS_IOU};
use crate::model::Dunet;
use crate::preprocess::letterbox;
use crate::tensor::{Mode, Tensor, TensorError};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// `(first step, rate)` pairs; the first must start at step 0.
    pub schedule: Vec<(usize, f64)>,
    pub weight_decay: f64,
    pub momentum: f64,
    pub neg_pos_ratio: f64,
    pub loc_weight: f64,
    pub max_steps: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    /// Mirror each sampled image horizontally with probability 1/2.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            schedule: vec![(0, 0.02), (3000, 0.005), (4500, 0.001)],
            weight_decay: 5e-4,
            momentum: 0.9,
            neg_pos_ratio: NEG_POS_RATIO,
            loc_weight: LOC_WEIGHT,
            max_steps: 5000,
            seed: 0,
            checkpoint_every: 1000,
            hflip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push("batch_size must be >= 1".to_string());
        }
        match self.schedule.first() {
            None => v.push("schedule is empty".into()),
            Some((s, _)) if *s != 0 => v.push("schedule must start at step 0".into()),
            _ => {}
        }
        if self.schedule.iter().any(|(_, r)| !(*r > 0.0)) {
            v.push("learning rates must be > 0".into());
        }
        if self.schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            v.push("schedule steps must increase".into());
        }
        if !(self.neg_pos_ratio > 0.0) {
            v.push("neg_pos_ratio must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.loc_weight < 0.0 {
            v.push("momentum must be in [0,1), weight_decay and loc_weight >= 0".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(v.join("; ")))
        }
    }

    pub fn rate_at(&self, step: usize) -> f64 {
        self.schedule.iter().take_while(|(s, _)| *s <= step).last().map_or(self.schedule[0].1, |p| p.1)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training samples")]
    EmptyDataset,
    #[error("loss became non-finite at step {step}; last finite loss {last_finite:?}")]
    NonFinite { step: usize, last_finite: Option<f64> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// A network-ready image with ground truth in input-normalized coordinates.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `3 * S * S` values, channel-major.
    pub pixels: Vec<f64>,
    pub gts: Vec<(usize, BBox)>,
}

impl Sample {
    pub fn flipped(&self, size: usize) -> Sample {
        let mut pixels = self.pixels.clone();
        for row in pixels.chunks_exact_mut(size) {
            row.reverse();
        }
        let gts = self.gts.iter().map(|(c, b)| (*c, BBox::new(1.0 - b.xmax, b.ymin, 1.0 - b.xmin, b.ymax))).collect();
        Sample { pixels, gts }
    }
}

pub fn load_samples(ds: &AnnotatedDataset, frames: &[&FrameRecord], size: usize) -> Result<Vec<Sample>, TrainError> {
    frames
        .iter()
        .map(|f| {
            let img = ds.load_image(f)?;
            let (t, lb) = letterbox(&img, size);
            let gts = f.boxes.iter().map(|(c, b)| (*c, lb.to_input(b))).collect();
            Ok(Sample { pixels: t.into_data(), gts })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub total: f64,
    pub conf: f64,
    pub loc: f64,
}

/// Model plus loss graph, optimizer state and anchor tables.
pub struct Trainer {
    pub model: Dunet,
    pub cfg: TrainConfig,
    nodes: MultiboxNodes,
    sgd: Sgd,
    anchors: Vec<Anchor>,
    anchor_boxes: Vec<BBox>,
}

impl Trainer {
    pub fn new(mut model: Dunet, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let scores: Vec<_> = model.heads.iter().map(|h| h.scores).collect();
        let offsets: Vec<_> = model.heads.iter().map(|h| h.offsets).collect();
        let nodes = attach_multibox_loss(
            &mut model.graph,
            &scores,
            &offsets,
            model.cfg.num_classes,
            cfg.neg_pos_ratio,
            cfg.loc_weight,
        );
        let sgd = Sgd::new(&model.graph, cfg.momentum, cfg.weight_decay);
        let anchors = generate_anchors(&model.cfg);
        let anchor_boxes = anchors.iter().map(Anchor::to_bbox).collect();
        Ok(Self { model, cfg, nodes, sgd, anchors, anchor_boxes })
    }

    fn load_batch(&mut self, batch: &[&Sample]) -> Result<(), TrainError> {
        let s = self.model.cfg.input_size;
        let m = self.anchors.len();
        let mut pixels = Vec::with_capacity(batch.len() * 3 * s * s);
        let mut labels = Vec::with_capacity(batch.len() * m);
        let mut offsets = Vec::with_capacity(batch.len() * m * 4);
        for sample in batch {
            pixels.extend_from_slice(&sample.pixels);
            let t = build_targets(&self.anchors, &self.anchor_boxes, &sample.gts, POS_IOU);
            labels.extend(t.labels);
            offsets.extend(t.offsets);
        }
        let n = batch.len();
        self.model.set_images(Tensor::new(vec![n, 3, s, s], pixels)?)?;
        self.model.graph.set_input(self.nodes.labels, Tensor::new(vec![n, m], labels)?)?;
        self.model.graph.set_input(self.nodes.loc_targets, Tensor::new(vec![n, m, 4], offsets)?)?;
        Ok(())
    }

    /// Loss on a batch without updating anything (BN uses running statistics).
    pub fn evaluate_loss(&mut self, batch: &[&Sample]) -> Result<StepLoss, TrainError> {
        self.load_batch(batch)?;
        self.model.graph.forward(&[self.nodes.total], Mode::Infer)?;
        Ok(self.read_loss(0))
    }

    fn read_loss(&self, step: usize) -> StepLoss {
        let v = |id| self.model.graph.value(id).expect("evaluated").data()[0];
        StepLoss { step, total: v(self.nodes.total), conf: v(self.nodes.conf), loc: v(self.nodes.loc) }
    }

    /// One forward/backward/update; returns the loss before the update.
    pub fn step(&mut self, batch: &[&Sample], step: usize) -> Result<StepLoss, TrainError> {
        self.load_batch(batch)?;
        self.model.graph.forward(&[self.nodes.total], Mode::Train)?;
        let loss = self.read_loss(step);
        if !loss.total.is_finite() {
            return Ok(loss);
        }
        self.model.graph.zero_grad();
        self.model.graph.backward(self.nodes.total)?;
        self.sgd.step(&mut self.model.graph, self.cfg.rate_at(step));
        Ok(loss)
    }

    pub fn into_model(self) -> Dunet {
        self.model
    }
}

/// Seeded epoch shuffler yielding sample indices forever.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..n).collect(), pos: n };
        s.next_batch(0);
        s
    }

    fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }

    fn coin(&mut self) -> bool {
        rand::Rng::gen_bool(&mut self.rng, 0.5)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<StepLoss>,
    pub checkpoint: Option<PathBuf>,
}

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Runs `max_steps` minibatch steps. With `out_dir`, writes the loss curve
/// as it goes and checkpoints periodically and at the end.
pub fn train(trainer: &mut Trainer, samples: &[Sample], out_dir: Option<&Path>) -> Result<TrainReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let size = trainer.model.cfg.input_size;
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(write_err(dir))?;
            let path = dir.join(LOSS_FILE);
            let mut w = BufWriter::new(fs::File::create(&path).map_err(write_err(&path))?);
            writeln!(w, "step,total_loss,conf_loss,loc_loss").map_err(write_err(&path))?;
            Some((w, path))
        }
        None => None,
    };
    let ckpt_path = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let mut sampler = Sampler::new(samples.len(), trainer.cfg.seed);
    let mut losses = Vec::with_capacity(trainer.cfg.max_steps);
    let mut last_finite = None;
    for step in 0..trainer.cfg.max_steps {
        let idx = sampler.next_batch(trainer.cfg.batch_size);
        let flipped: Vec<Option<Sample>> = idx
            .iter()
            .map(|&i| (trainer.cfg.hflip && sampler.coin()).then(|| samples[i].flipped(size)))
            .collect();
        let batch: Vec<&Sample> = idx.iter().zip(&flipped).map(|(&i, f)| f.as_ref().unwrap_or(&samples[i])).collect();
        let loss = trainer.step(&batch, step)?;
        if !loss.total.is_finite() {
            log::error!("non-finite loss at step {step}");
            return Err(TrainError::NonFinite { step, last_finite });
        }
        last_finite = Some(loss.total);
        if let Some((w, path)) = csv.as_mut() {
            writeln!(w, "{},{},{},{}", step, loss.total, loss.conf, loss.loc).map_err(write_err(path))?;
        }
        if step % 100 == 0 {
            log::info!("step {step} loss {:.4} (conf {:.4}, loc {:.4})", loss.total, loss.conf, loss.loc);
        }
        losses.push(loss);
        let every = trainer.cfg.checkpoint_every;
        if let Some(p) = &ckpt_path {
            if every > 0 && (step + 1) % every == 0 && step + 1 < trainer.cfg.max_steps {
                save_model(p, &trainer.model)?;
            }
        }
    }
    if let Some((w, path)) = csv.as_mut() {
        w.flush().map_err(write_err(path))?;
    }
    if let Some(p) = &ckpt_path {
        save_model(p, &trainer.model)?;
    }
    Ok(TrainReport { losses, checkpoint: ckpt_path })
}
