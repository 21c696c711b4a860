//! COCO-style detection metrics: all-points interpolated AP per class on the
//! IoU grid 0.50:0.05:0.95.

use crate::bbox::{BBox, LabeledBox};
use crate::detector::{Detection, Predictor};
use crate::error::{Error, Result};
use crate::pseudo::nms;
use crate::scenes::{stack_images, Scene};

pub use crate::bbox::iou;

pub const IOU_GRID: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// A detection of one class, tagged with its image index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// `ap[class][t]` at `IOU_GRID[t]`.
    pub ap: Vec<Vec<f64>>,
    pub ap50: f64,
    pub map: f64,
}

/// Detection indices in rank order: descending score, ties in input order.
pub fn rank(dets: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy matching in rank order. Each detection takes the unmatched ground
/// truth of its image with the highest IoU at or above `threshold`, ties to
/// the lower ground-truth index. Returns the true-positive flag per rank.
pub fn greedy_match(dets: &[ScoredBox], truths: &[Vec<BBox>], threshold: f64) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = truths.iter().map(|g| vec![false; g.len()]).collect();
    rank(dets)
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in truths[d.image].iter().enumerate() {
                if used[d.image][j] {
                    continue;
                }
                let v = iou(&d.bbox, g);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    used[d.image][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the precision envelope for ranked true-positive flags.
pub fn ap_from_flags(flags: &[bool], num_truths: usize) -> f64 {
    if num_truths == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut tp = 0usize;
    let precision: Vec<f64> = flags
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += hit as usize;
            tp as f64 / (i + 1) as f64
        })
        .collect();
    let mut envelope = precision;
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let sum: f64 = flags.iter().zip(&envelope).filter(|(hit, _)| **hit).fold(0.0, |acc, (_, p)| acc + p);
    sum / num_truths as f64
}

fn check_inputs(dets: &[ScoredBox], truths: &[Vec<BBox>]) -> Result<()> {
    for d in dets {
        if !d.score.is_finite() {
            return Err(Error::invalid("detections", "non-finite score"));
        }
        if d.image >= truths.len() {
            return Err(Error::invalid(
                "detections",
                format!("image {} out of range for {} images", d.image, truths.len()),
            ));
        }
    }
    Ok(())
}

/// All-points AP of one class at one IoU threshold.
///
/// With no ground truths the AP is 1 when there are also no detections and
/// 0 otherwise.
pub fn average_precision(dets: &[ScoredBox], truths: &[Vec<BBox>], threshold: f64) -> Result<f64> {
    check_inputs(dets, truths)?;
    let n: usize = truths.iter().map(Vec::len).sum();
    Ok(ap_from_flags(&greedy_match(dets, truths, threshold), n))
}

/// Per-class AP over [`IOU_GRID`] for per-image predictions and truths.
pub fn evaluate(predictions: &[Vec<Detection>], truths: &[Vec<LabeledBox>], num_classes: usize) -> Result<EvalResult> {
    if predictions.len() != truths.len() {
        return Err(Error::invalid(
            "predictions",
            format!("{} images of predictions for {} of truths", predictions.len(), truths.len()),
        ));
    }
    let mut ap = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let dets: Vec<ScoredBox> = predictions
            .iter()
            .enumerate()
            .flat_map(|(image, ds)| {
                ds.iter().filter(|d| d.class_id == c).map(move |d| ScoredBox { image, score: d.score, bbox: d.bbox })
            })
            .collect();
        let gts: Vec<Vec<BBox>> =
            truths.iter().map(|ts| ts.iter().filter(|t| t.class_id == c).map(|t| t.bbox).collect()).collect();
        ap.push(IOU_GRID.iter().map(|&t| average_precision(&dets, &gts, t)).collect::<Result<Vec<f64>>>()?);
    }
    Ok(summarize(ap))
}

fn summarize(ap: Vec<Vec<f64>>) -> EvalResult {
    let k = ap.len().max(1) as f64;
    let ap50 = ap.iter().map(|r| r[0]).sum::<f64>() / k;
    let map = ap.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).sum::<f64>() / k;
    EvalResult { ap, ap50, map }
}

/// Post-processing applied to raw predictions before scoring.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub min_score: f64,
    pub nms_iou: f64,
    pub max_per_image: usize,
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { min_score: 0.01, nms_iou: 0.5, max_per_image: 100, batch: 16 }
    }
}

/// Runs `model` over `scenes`, keeps detections above `min_score`, applies
/// class-wise NMS and the per-image cap, then [`evaluate`]s.
pub fn evaluate_model(
    model: &dyn Predictor,
    scenes: &[Scene],
    num_classes: usize,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    if cfg.batch == 0 {
        return Err(Error::invalid("batch", "must be at least 1"));
    }
    let mut predictions = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(cfg.batch) {
        let images = stack_images(chunk.iter().map(|s| &s.image))?;
        for dets in model.predict(&images)? {
            let kept: Vec<Detection> = dets.into_iter().filter(|d| d.score >= cfg.min_score).collect();
            let mut kept = nms(kept, cfg.nms_iou, true);
            kept.truncate(cfg.max_per_image);
            predictions.push(kept);
        }
    }
    let truths: Vec<Vec<LabeledBox>> = scenes.iter().map(|s| s.objects.clone()).collect();
    evaluate(&predictions, &truths, num_classes)
}

#[cfg(test)]
mod tests;
