use super::DetectorConfig;
use crate::bbox::{iou, BBox, LabeledBox};
use crate::tensor::Tensor;

/// Best target by IoU with `b`, ties to the lowest index. `None` when no
/// target reaches `min_iou`.
fn best_match(b: &BBox, targets: &[LabeledBox], min_iou: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in targets.iter().enumerate() {
        let v = iou(b, &t.bbox);
        if v >= min_iou && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Proposal-branch positives: cells whose centre lies inside a target. When
/// several contain it, the one overlapping the cell anchor most wins.
pub fn proposal_positives(cfg: &DetectorConfig, targets: &[Vec<LabeledBox>]) -> Vec<Option<usize>> {
    let (gh, gw, s) = (cfg.grid_h(), cfg.grid_w(), cfg.box_scale());
    let half = cfg.anchor_size / 2.0;
    let mut out = Vec::with_capacity(targets.len() * gh * gw);
    for objs in targets {
        for y in 0..gh {
            for x in 0..gw {
                let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                let anchor = BBox::new(cx - half, cy - half, cx + half, cy + half);
                let mut best: Option<(usize, f64)> = None;
                for (i, t) in objs.iter().enumerate() {
                    if !t.bbox.contains_point(cx, cy) {
                        continue;
                    }
                    let v = iou(&anchor, &t.bbox);
                    if best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((i, v));
                    }
                }
                out.push(best.map(|(i, _)| i));
            }
        }
    }
    out
}

/// Stage positives: a cell is positive when its incoming box has IoU at
/// least `tau` with some target of its image.
pub fn assign_positives(boxes: &Tensor, cells: usize, targets: &[Vec<LabeledBox>], tau: f64) -> Vec<Option<usize>> {
    boxes
        .data()
        .chunks(4)
        .enumerate()
        .map(|(m, b)| {
            let objs = &targets[m / cells];
            best_match(&BBox::new(b[0], b[1], b[2], b[3]), objs, tau)
        })
        .collect()
}
