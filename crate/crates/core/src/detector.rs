//! Anything that turns a frame into detections, plus dataset evaluation.

use image::RgbImage;

use crate::dataset::{AnnotatedDataset, DatasetError, FrameRecord};
use crate::geometry::{decode_detections, generate_anchors, Anchor, BBox, DecodeParams, Detection};
use crate::metrics::{evaluate_frames, evaluate_tier, EvalResult, EvalThresholds, FrameEval};
use crate::model::Dunet;
use crate::preprocess::letterbox;
use crate::tensor::{Mode, TensorError};

/// Detections come back in frame-normalized coordinates.
pub trait Detector {
    /// `index` identifies the frame within the current sequence.
    fn detect(&mut self, index: usize, image: &RgbImage) -> Result<Vec<Detection>, TensorError>;
}

pub struct DunetDetector {
    pub model: Dunet,
    pub params: DecodeParams,
    anchors: Vec<Anchor>,
}

impl DunetDetector {
    pub fn new(model: Dunet, params: DecodeParams) -> Self {
        let anchors = generate_anchors(&model.cfg);
        Self { model, params, anchors }
    }

    pub fn num_classes(&self) -> usize {
        self.model.cfg.num_classes
    }
}

impl Detector for DunetDetector {
    fn detect(&mut self, _index: usize, image: &RgbImage) -> Result<Vec<Detection>, TensorError> {
        let (input, lb) = letterbox(image, self.model.cfg.input_size);
        let heads = self.model.forward_detect(&input, Mode::Infer)?;
        let mut dets = decode_detections(&heads, &self.anchors, self.model.cfg.num_classes, &self.params)?;
        for d in &mut dets {
            d.bbox = lb.to_source(&d.bbox);
        }
        Ok(dets)
    }
}

/// Replays ground truth as perfect detections with score 1.
pub struct OracleDetector {
    pub truth: Vec<Vec<(usize, BBox)>>,
}

impl Detector for OracleDetector {
    fn detect(&mut self, index: usize, _image: &RgbImage) -> Result<Vec<Detection>, TensorError> {
        Ok(self
            .truth
            .get(index)
            .map(|gts| {
                gts.iter()
                    .enumerate()
                    .map(|(i, (c, b))| Detection { bbox: *b, class_id: *c, score: 1.0, anchor: i })
                    .collect()
            })
            .unwrap_or_default())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Runs the detector over frames and pairs the output with ground truth.
pub fn collect_frames(
    detector: &mut dyn Detector,
    ds: &AnnotatedDataset,
    frames: &[&FrameRecord],
) -> Result<Vec<FrameEval>, EvalError> {
    if frames.is_empty() {
        return Err(EvalError::Empty);
    }
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let img = ds.load_image(f)?;
            Ok(FrameEval { detections: detector.detect(i, &img)?, gts: f.boxes.clone() })
        })
        .collect()
}

pub fn evaluate(
    detector: &mut dyn Detector,
    ds: &AnnotatedDataset,
    frames: &[&FrameRecord],
    th: &EvalThresholds,
) -> Result<EvalResult, EvalError> {
    Ok(evaluate_frames(&collect_frames(detector, ds, frames)?, &ds.labels, th))
}

/// Overall and tier-restricted results from one detector pass.
pub fn evaluate_with_tier(
    detector: &mut dyn Detector,
    ds: &AnnotatedDataset,
    frames: &[&FrameRecord],
    th: &EvalThresholds,
    in_tier: &dyn Fn(&BBox) -> bool,
) -> Result<(EvalResult, EvalResult), EvalError> {
    let evals = collect_frames(detector, ds, frames)?;
    Ok((evaluate_frames(&evals, &ds.labels, th), evaluate_tier(&evals, &ds.labels, th, in_tier)))
}
