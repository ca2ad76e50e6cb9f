//! Detector adapter contract, raw score containers, NMS, and the built-in
//! differentiable toy detector.
//!
//! Adapters isolate model specifics from the rest of the system: they expose
//! pre-sigmoid, pre-NMS raw scores with a gradient path back to the input
//! image, plus ordinary post-NMS inference. Real model-zoo families are
//! loaded through backend plugins registered at runtime; the core only ships
//! the toy backend.

mod registry;
mod toy;

pub use registry::{list_adapters, register_backend, AdapterEntry, Registry};
pub use toy::{builtin_template, template_names, ToyDetector, ToyTemplate};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::losses;
use crate::patch::ArchGroup;
use crate::Image;

/// Pre-sigmoid, pre-NMS scores, tagged with their architecture group.
#[derive(Debug, Clone, PartialEq)]
pub enum RawScores {
    /// Flat objectness logits over all anchor boxes.
    Objectness { logits: Vec<f64> },
    /// Class logits, candidates x classes.
    ClassMax { logits: Array2<f64> },
    /// Dual label assignment: one-to-many and one-to-one head logits.
    DualHead { one2many: Vec<f64>, one2one: Vec<f64> },
}

impl RawScores {
    pub fn group(&self) -> ArchGroup {
        match self {
            RawScores::Objectness { .. } => ArchGroup::ObjectnessV7,
            RawScores::ClassMax { .. } => ArchGroup::ClassMax,
            RawScores::DualHead { .. } => ArchGroup::DualHeadV10,
        }
    }

    /// Evaluate the architecture-specific target loss on these scores.
    pub fn target_loss(&self, class_only: Option<usize>) -> Result<f64> {
        match self {
            RawScores::Objectness { logits } => losses::target_loss_objectness(logits),
            RawScores::ClassMax { logits } => {
                losses::target_loss_classmax(logits.view(), class_only)
            }
            RawScores::DualHead { one2many, one2one } => {
                losses::target_loss_dualhead(one2many, one2one)
            }
        }
    }

    /// Upstream gradient of the target loss: one at each contributing
    /// maximum, zero elsewhere. Shape-compatible with `self`.
    pub fn target_loss_grad(&self, class_only: Option<usize>) -> Result<RawScores> {
        fn one_hot_max(v: &[f64]) -> Result<Vec<f64>> {
            let (idx, _) = v
                .iter()
                .enumerate()
                .fold(None::<(usize, f64)>, |acc, (i, &x)| match acc {
                    Some((_, best)) if best >= x => acc,
                    _ => Some((i, x)),
                })
                .ok_or_else(|| Error::invalid("empty score set"))?;
            let mut g = vec![0.0; v.len()];
            g[idx] = 1.0;
            Ok(g)
        }
        match self {
            RawScores::Objectness { logits } => Ok(RawScores::Objectness {
                logits: one_hot_max(logits)?,
            }),
            RawScores::ClassMax { logits } => {
                let mut best: Option<((usize, usize), f64)> = None;
                for ((r, c), &v) in logits.indexed_iter() {
                    if class_only.map_or(false, |only| c != only) {
                        continue;
                    }
                    if best.map_or(true, |(_, b)| v > b) {
                        best = Some(((r, c), v));
                    }
                }
                let ((r, c), _) = best.ok_or_else(|| Error::invalid("empty score set"))?;
                let mut g = Array2::zeros(logits.raw_dim());
                g[[r, c]] = 1.0;
                Ok(RawScores::ClassMax { logits: g })
            }
            RawScores::DualHead { one2many, one2one } => Ok(RawScores::DualHead {
                one2many: one_hot_max(one2many)?,
                one2one: one_hot_max(one2one)?,
            }),
        }
    }
}

/// A post-sigmoid, post-NMS detection.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub category: usize,
}

/// Contract wrapping one detector.
pub trait DetectorAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn group(&self) -> ArchGroup;
    /// Expected input size (height, width); the harness letterboxes first.
    fn input_size(&self) -> (usize, usize);
    fn weights_id(&self) -> &str;

    /// Extract pre-sigmoid, pre-NMS scores. Differentiable with respect to
    /// the image pixels via [`DetectorAdapter::raw_scores_backward`].
    fn raw_scores(&self, image: &Image) -> Result<RawScores>;

    /// Vector-Jacobian product of [`DetectorAdapter::raw_scores`]: map an
    /// upstream gradient over the logits back to an image-space gradient.
    fn raw_scores_backward(&self, image: &Image, upstream: &RawScores) -> Result<Image>;

    /// Post-sigmoid thresholding and greedy NMS, sorted by descending score.
    fn detect(&self, image: &Image, conf_thresh: f64, iou_thresh: f64) -> Result<Vec<Detection>>;

    /// RT-DETR-style adapters set this to skip NMS at inference.
    fn uses_nms(&self) -> bool {
        true
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn check_thresholds(conf_thresh: f64, iou_thresh: f64) -> Result<()> {
    if !(0.0 < conf_thresh && conf_thresh < 1.0) {
        return Err(Error::invalid("conf threshold must lie in (0, 1)"));
    }
    if !(0.0 < iou_thresh && iou_thresh < 1.0) {
        return Err(Error::invalid("iou threshold must lie in (0, 1)"));
    }
    Ok(())
}

/// Greedy hard NMS over same-class detections.
///
/// Input need not be sorted; output is sorted by descending score.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut keep: Vec<Detection> = Vec::with_capacity(dets.len());
    'outer: for d in dets {
        for k in &keep {
            if k.category == d.category && crate::evaluation::iou(&k.bbox, &d.bbox) > iou_thresh {
                continue 'outer;
            }
        }
        keep.push(d);
    }
    keep
}
