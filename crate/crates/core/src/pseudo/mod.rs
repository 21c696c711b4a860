//! Teacher inference on weak views and confidence filtering into pseudo-labels.

use crate::bbox::{iou, BBox, LabeledBox};
use crate::detector::{Detection, Predictor};
use crate::error::{Error, Result};
use crate::scenes::{stack_images, WeakView};

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub class_id: usize,
    /// Base-frame box.
    pub bbox: BBox,
    pub confidence: f64,
    /// Per-boundary spread in pixels, ordered like the box coordinates.
    pub spread: [f64; 4],
}

impl PseudoLabel {
    pub fn target(&self) -> LabeledBox {
        LabeledBox { class_id: self.class_id, bbox: self.bbox }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoConfig {
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig { conf_threshold: 0.7, nms_iou: 0.5 }
    }
}

fn unflip(d: Detection, width: f64) -> Detection {
    let [l, t, r, b] = d.spread;
    Detection { bbox: d.bbox.flip_horizontal(width), spread: [r, t, l, b], ..d }
}

/// Runs the frozen teacher on a batch of weak views and maps every box back
/// through the view's flip.
pub fn infer_teacher(teacher: &dyn Predictor, views: &[WeakView]) -> Result<Vec<Vec<Detection>>> {
    if views.is_empty() {
        return Ok(Vec::new());
    }
    let images = stack_images(views.iter().map(|v| &v.scene.image))?;
    to_base_frame(teacher.predict(&images)?, views)
}

/// Maps per-view detections into the un-flipped frame.
pub fn to_base_frame(dets: Vec<Vec<Detection>>, views: &[WeakView]) -> Result<Vec<Vec<Detection>>> {
    if dets.len() != views.len() {
        return Err(Error::invalid("detections", format!("{} images for {} views", dets.len(), views.len())));
    }
    Ok(dets
        .into_iter()
        .zip(views)
        .map(|(ds, v)| {
            if v.flip_applied {
                let w = v.scene.width() as f64;
                ds.into_iter().map(|d| unflip(d, w)).collect()
            } else {
                ds
            }
        })
        .collect())
}

/// Greedy non-maximum suppression in descending score order (ties keep input
/// order). A box is dropped when its IoU with a kept box exceeds `iou_threshold`;
/// with `class_aware` only boxes of the same class suppress each other.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64, class_aware: bool) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed =
            kept.iter().any(|k| (!class_aware || k.class_id == d.class_id) && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Class-agnostic NMS at `nms_iou`, then drops survivors scoring below
/// `conf_threshold`.
pub fn filter(dets: Vec<Detection>, conf_threshold: f64, nms_iou: f64) -> Result<Vec<PseudoLabel>> {
    for (arg, v) in [("conf_threshold", conf_threshold), ("nms_iou", nms_iou)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(arg, format!("{v} outside [0, 1]")));
        }
    }
    Ok(nms(dets, nms_iou, false)
        .into_iter()
        .filter(|d| d.score >= conf_threshold)
        .map(|d| PseudoLabel { class_id: d.class_id, bbox: d.bbox, confidence: d.score, spread: d.spread })
        .collect())
}

/// [`infer_teacher`] followed by [`filter`] per image.
pub fn pseudo_label(teacher: &dyn Predictor, views: &[WeakView], cfg: &PseudoConfig) -> Result<Vec<Vec<PseudoLabel>>> {
    infer_teacher(teacher, views)?.into_iter().map(|d| filter(d, cfg.conf_threshold, cfg.nms_iou)).collect()
}

#[cfg(test)]
mod tests;
