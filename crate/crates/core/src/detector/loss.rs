use super::assign::{assign_positives, proposal_positives};
use super::forward::{forward, BoundParams, HeadOutputs};
use super::DetectorConfig;
use crate::bbox::LabeledBox;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Positive-assignment IoU per cascade stage; a single-stage detector uses the first.
    pub tau: [f64; 3],
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub npll_rho: f64,
    /// Include the uncertainty terms when the detector has spreads.
    pub uncertainty_terms: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: [0.5, 0.6, 0.7],
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            npll_rho: 0.25,
            uncertainty_terms: true,
        }
    }
}

/// Scalar loss on the tape plus the value of every term that contributed.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub terms: Vec<(String, f64)>,
}

impl LossBreakdown {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

struct Positives {
    /// Flat box-coordinate indices `m * 4 + j` of positive cells.
    coords: Vec<usize>,
    /// Matching target coordinates.
    targets: Vec<f64>,
    count: usize,
}

fn collect_positives(assign: &[Option<usize>], cells: usize, targets: &[Vec<LabeledBox>]) -> Positives {
    let mut p = Positives { coords: Vec::new(), targets: Vec::new(), count: 0 };
    for (m, a) in assign.iter().enumerate() {
        if let Some(t) = a {
            let b = targets[m / cells][*t].bbox.to_array();
            for (j, v) in b.iter().enumerate() {
                p.coords.push(m * 4 + j);
                p.targets.push(*v);
            }
            p.count += 1;
        }
    }
    p
}

/// `(pred[pos] - target) / scale` on the tape.
fn normalized_residual(tape: &mut Tape, boxes: Var, pos: &Positives, scale: f64) -> Result<Var> {
    let pred = tape.gather(boxes, pos.coords.clone())?;
    let tgt = tape.constant(Tensor::new(vec![pos.targets.len()], pos.targets.clone())?);
    let d = tape.sub(pred, tgt)?;
    tape.scale(d, 1.0 / scale)
}

struct Accum {
    total: Option<Var>,
    terms: Vec<(String, f64)>,
}

impl Accum {
    fn push(&mut self, tape: &mut Tape, name: String, v: Var) -> Result<()> {
        self.terms.push((name, tape.value(v).item()?));
        self.total = Some(match self.total {
            None => v,
            Some(t) => tape.add(t, v)?,
        });
        Ok(())
    }
}

/// Sum of the proposal classification and regression terms and, per stage,
/// classification, regression and uncertainty terms.
///
/// The objectness term averages over all cells. Stage focal terms sum over all
/// cells and divide by the stage's positive count (at least one); regression
/// and uncertainty terms average over positive cells and are skipped when a
/// stage has none.
pub fn detection_loss(
    tape: &mut Tape,
    cfg: &DetectorConfig,
    lcfg: &LossConfig,
    heads: &HeadOutputs,
    targets: &[Vec<LabeledBox>],
) -> Result<LossBreakdown> {
    if targets.is_empty() {
        return Err(Error::invalid("batch", "empty batch"));
    }
    if targets.len() != heads.batch {
        return Err(Error::shape(
            "detection_loss",
            format!("{} target lists for a batch of {}", targets.len(), heads.batch),
        ));
    }
    let k = cfg.num_classes;
    if let Some(bad) = targets.iter().flatten().find(|t| t.class_id >= k) {
        return Err(Error::invalid("class_id", format!("{} out of range for {k} classes", bad.class_id)));
    }
    let cells = cfg.cells();
    let scale = cfg.box_scale();
    let mut acc = Accum { total: None, terms: Vec::new() };

    // proposal branch
    let assign0 = proposal_positives(cfg, targets);
    let labels: Vec<usize> = assign0.iter().enumerate().map(|(m, a)| m * 2 + a.is_some() as usize).collect();
    let ls = tape.log_softmax(heads.objectness, 1)?;
    let picked = tape.gather(ls, labels)?;
    let mean = tape.mean(picked)?;
    let ce = tape.scale(mean, -1.0)?;
    acc.push(tape, "rpn_cls".into(), ce)?;

    let pos0 = collect_positives(&assign0, cells, targets);
    if pos0.count > 0 {
        let d = normalized_residual(tape, heads.boxes[0], &pos0, scale)?;
        let l = tape.smooth_l1(d)?;
        let s = tape.sum(l)?;
        let reg = tape.scale(s, 1.0 / pos0.count as f64)?;
        acc.push(tape, "rpn_reg".into(), reg)?;
    }

    for stage in 1..=heads.num_stages() {
        let incoming = tape.value(heads.boxes[stage - 1]).clone();
        let assign = assign_positives(&incoming, cells, targets, lcfg.tau[stage - 1]);

        let idx: Vec<usize> = assign
            .iter()
            .enumerate()
            .map(|(m, a)| {
                let label = a.map_or(k, |t| targets[m / cells][t].class_id);
                m * (k + 1) + label
            })
            .collect();
        let ls = tape.log_softmax(heads.class_logits[stage - 1], 1)?;
        let lp = tape.gather(ls, idx)?;
        let p = tape.exp(lp)?;
        let neg = tape.scale(p, -1.0)?;
        let q = tape.offset(neg, 1.0)?;
        let w = tape.powf(q, lcfg.focal_gamma)?;
        let wl = tape.mul(w, lp)?;
        let pos = collect_positives(&assign, cells, targets);
        let total = tape.sum(wl)?;
        let focal = tape.scale(total, -lcfg.focal_alpha / pos.count.max(1) as f64)?;
        acc.push(tape, format!("stage{stage}_cls"), focal)?;

        if pos.count == 0 {
            continue;
        }
        let inv = 1.0 / pos.count as f64;
        let d = normalized_residual(tape, heads.boxes[stage], &pos, scale)?;
        let l = tape.smooth_l1(d)?;
        let s = tape.sum(l)?;
        let reg = tape.scale(s, inv)?;
        acc.push(tape, format!("stage{stage}_reg"), reg)?;

        if let (Some(spreads), true) = (&heads.spreads, lcfg.uncertainty_terms) {
            let sp = tape.gather(spreads[stage - 1], pos.coords.clone())?;
            let a = tape.abs(d)?;
            let r = tape.div(a, sp)?;
            let two_s = tape.scale(sp, 2.0)?;
            let ln = tape.log(two_s)?;
            let per = tape.add(r, ln)?;
            let s = tape.sum(per)?;
            let unc = tape.scale(s, lcfg.npll_rho * inv)?;
            acc.push(tape, format!("stage{stage}_unc"), unc)?;
        }
    }

    Ok(LossBreakdown { total: acc.total.expect("classification terms always present"), terms: acc.terms })
}

/// Forward pass plus [`detection_loss`].
pub fn supervised_loss(
    tape: &mut Tape,
    cfg: &DetectorConfig,
    lcfg: &LossConfig,
    params: &BoundParams,
    images: Var,
    targets: &[Vec<LabeledBox>],
) -> Result<LossBreakdown> {
    if targets.is_empty() {
        return Err(Error::invalid("batch", "empty batch"));
    }
    let out = forward(tape, cfg, params, images)?;
    detection_loss(tape, cfg, lcfg, &out.heads, targets)
}
