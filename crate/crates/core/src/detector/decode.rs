use super::forward::{forward_values, HeadValues};
use super::{DetectorConfig, ParameterSet};
use crate::bbox::BBox;
use crate::error::Result;
use crate::tensor::{softmax_slice, Tensor};

/// One per-cell prediction before filtering.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    /// Objectness times the best foreground class probability.
    pub score: f64,
    /// Per-boundary spread in pixels.
    pub spread: [f64; 4],
}

/// Final-stage detections for every cell, grouped by image. Boxes are clamped
/// to the image; cells whose clamped box is empty are dropped.
pub fn decode(cfg: &DetectorConfig, v: &HeadValues) -> Vec<Vec<Detection>> {
    let cells = cfg.cells();
    let k = cfg.num_classes;
    let last = v.class_logits.len();
    let boxes = v.boxes[last].data();
    let logits = v.class_logits[last - 1].data();
    let spreads = v.spreads.as_ref().map(|s| s[last - 1].data());
    let scale = cfg.box_scale();
    let (w, h) = (cfg.image_w as f64, cfg.image_h as f64);

    let mut out = vec![Vec::new(); v.batch];
    for m in 0..v.batch * cells {
        let obj = v.objectness.data()[m * 2..m * 2 + 2].to_vec();
        let p_obj = softmax_slice(&obj)[1];
        let probs = softmax_slice(&logits[m * (k + 1)..(m + 1) * (k + 1)]);
        let (class_id, p_cls) =
            probs[..k]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &p)| if p > best.1 { (c, p) } else { best });
        let b = &boxes[m * 4..m * 4 + 4];
        let bbox = BBox::new(b[0], b[1], b[2], b[3]).clamp(w, h);
        if !bbox.is_valid() {
            continue;
        }
        let spread = match spreads {
            Some(s) => [s[m * 4] * scale, s[m * 4 + 1] * scale, s[m * 4 + 2] * scale, s[m * 4 + 3] * scale],
            None => [scale; 4],
        };
        out[m / cells].push(Detection { bbox, class_id, score: (p_obj * p_cls).clamp(0.0, 1.0), spread });
    }
    out
}

/// Anything that maps an image batch `[N, 1, H, W]` to per-image detections.
pub trait Predictor {
    fn predict(&self, images: &Tensor) -> Result<Vec<Vec<Detection>>>;
}

/// A detector network bound to fixed parameters, evaluated without a tape.
#[derive(Clone, Copy, Debug)]
pub struct Detector<'a> {
    pub cfg: &'a DetectorConfig,
    pub params: &'a ParameterSet,
}

impl Predictor for Detector<'_> {
    fn predict(&self, images: &Tensor) -> Result<Vec<Vec<Detection>>> {
        let v = forward_values(self.cfg, self.params, None, images)?;
        Ok(decode(self.cfg, &v))
    }
}
