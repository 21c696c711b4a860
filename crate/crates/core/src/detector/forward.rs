use std::collections::BTreeMap;

use super::{DetectorConfig, ParameterSet};
use crate::error::{Error, Result};
use crate::refine::ScalingSet;
use crate::tensor::{Tape, Tensor, Var};

/// Parameters placed on a tape, by layer name.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Misaligned(format!("layer `{name}` not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Places every tensor of `params` on the tape, as leaves when `trainable`.
pub fn bind(tape: &mut Tape, params: &ParameterSet, trainable: bool) -> BoundParams {
    let vars = params
        .iter()
        .map(|(name, t)| {
            let v = if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
            (name.clone(), v)
        })
        .collect();
    BoundParams { vars }
}

/// Frozen weights multiplied channel-wise by already-bound coefficients.
pub fn bind_scaled(tape: &mut Tape, params: &ParameterSet, omega: &BoundParams) -> Result<BoundParams> {
    if omega.vars.len() != params.len() {
        return Err(Error::Misaligned(format!("{} coefficient vectors for {} layers", omega.vars.len(), params.len())));
    }
    let mut vars = BTreeMap::new();
    for (name, t) in params.iter() {
        let w = tape.constant(t.clone());
        let scaled = tape.channel_scale(w, omega.get(name)?)?;
        vars.insert(name.clone(), scaled);
    }
    Ok(BoundParams { vars })
}

/// Tape handles of every head output. `boxes[0]` are the proposals, `boxes[k]`
/// the stage-`k` boxes; class logits and spreads are indexed from stage 1.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub batch: usize,
    /// `[M, 2]` logits (background, object), `M = batch * cells`.
    pub objectness: Var,
    /// `[M, 4]` pixel boxes, `x1 y1 x2 y2`.
    pub boxes: Vec<Var>,
    /// `[M, K + 1]`, background last.
    pub class_logits: Vec<Var>,
    /// `[M, 4]` positive spreads in stride units.
    pub spreads: Option<Vec<Var>>,
}

impl HeadOutputs {
    pub fn num_stages(&self) -> usize {
        self.class_logits.len()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Stage-1 and stage-2 backbone maps, `[N, C, H, W]`.
    pub features: [Var; 2],
    pub heads: HeadOutputs,
}

/// Plain-value copy of [`HeadOutputs`] plus the backbone maps.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadValues {
    pub batch: usize,
    pub objectness: Tensor,
    pub boxes: Vec<Tensor>,
    pub class_logits: Vec<Tensor>,
    pub spreads: Option<Vec<Tensor>>,
    pub features: [Tensor; 2],
}

/// Cell-centred default boxes `[batch * cells, 4]`, rows ordered `(n, y, x)`.
pub fn anchors(cfg: &DetectorConfig, batch: usize) -> Tensor {
    let (gh, gw, s) = (cfg.grid_h(), cfg.grid_w(), cfg.box_scale());
    let half = cfg.anchor_size / 2.0;
    let mut data = Vec::with_capacity(batch * gh * gw * 4);
    for _ in 0..batch {
        for y in 0..gh {
            for x in 0..gw {
                let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                data.extend_from_slice(&[cx - half, cy - half, cx + half, cy + half]);
            }
        }
    }
    Tensor::from_parts(vec![batch * gh * gw, 4], data)
}

/// Two conv-relu-pool stages.
pub fn backbone(tape: &mut Tape, cfg: &DetectorConfig, p: &BoundParams, images: Var) -> Result<[Var; 2]> {
    let s = tape.value(images).shape();
    if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.image_h || s[3] != cfg.image_w {
        return Err(Error::shape(
            "forward",
            format!("images {s:?}, expected [N, {}, {}, {}]", cfg.in_channels, cfg.image_h, cfg.image_w),
        ));
    }
    let pad = cfg.kernel / 2;
    let mut x = tape.offset(images, -0.5)?;
    let mut out = [images; 2];
    for (i, slot) in out.iter_mut().enumerate() {
        let w = p.get(&format!("backbone.conv{}.weight", i + 1))?;
        let b = p.get(&format!("backbone.conv{}.bias", i + 1))?;
        let c = tape.conv2d(x, w, b, pad)?;
        let r = tape.relu(c)?;
        x = tape.max_pool2(r)?;
        *slot = x;
    }
    Ok(out)
}

fn linear_head(tape: &mut Tape, p: &BoundParams, rows: Var, name: &str) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    tape.linear(rows, w, b)
}

/// Per-cell heads on the stage-2 map.
pub fn heads(tape: &mut Tape, cfg: &DetectorConfig, p: &BoundParams, stage2: Var) -> Result<HeadOutputs> {
    let batch = tape.value(stage2).shape()[0];
    let s = cfg.box_scale();
    let rows = tape.nchw_to_rows(stage2)?;
    let objectness = linear_head(tape, p, rows, "head.objectness")?;

    let anchor = tape.constant(anchors(cfg, batch));
    let d0 = linear_head(tape, p, rows, "head.rpn_box")?;
    let d0 = tape.scale(d0, s)?;
    let mut boxes = vec![tape.add(anchor, d0)?];
    let mut class_logits = Vec::new();
    let mut spreads = cfg.uncertainty.then(Vec::new);
    for k in 1..=cfg.num_stages() {
        let stage = format!("head.stage{k}");
        class_logits.push(linear_head(tape, p, rows, &format!("{stage}.cls"))?);
        let d = linear_head(tape, p, rows, &format!("{stage}.box"))?;
        let d = tape.scale(d, s)?;
        let prev = boxes[k - 1];
        boxes.push(tape.add(prev, d)?);
        if let Some(sp) = spreads.as_mut() {
            let raw = linear_head(tape, p, rows, &format!("{stage}.spread"))?;
            let pos = tape.softplus(raw)?;
            sp.push(tape.offset(pos, cfg.spread_floor)?);
        }
    }
    Ok(HeadOutputs { batch, objectness, boxes, class_logits, spreads })
}

pub fn forward(tape: &mut Tape, cfg: &DetectorConfig, p: &BoundParams, images: Var) -> Result<ForwardOutput> {
    let features = backbone(tape, cfg, p, images)?;
    let heads = heads(tape, cfg, p, features[1])?;
    Ok(ForwardOutput { features, heads })
}

impl HeadValues {
    pub fn from_tape(tape: &Tape, out: &ForwardOutput) -> Self {
        let h = &out.heads;
        let v = |x: &Var| tape.value(*x).clone();
        HeadValues {
            batch: h.batch,
            objectness: v(&h.objectness),
            boxes: h.boxes.iter().map(v).collect(),
            class_logits: h.class_logits.iter().map(v).collect(),
            spreads: h.spreads.as_ref().map(|s| s.iter().map(v).collect()),
            features: [v(&out.features[0]), v(&out.features[1])],
        }
    }
}

/// Gradient-free forward pass, optionally with channel scaling applied to
/// every weight.
pub fn forward_values(
    cfg: &DetectorConfig,
    params: &ParameterSet,
    scaling: Option<&ScalingSet>,
    images: &Tensor,
) -> Result<HeadValues> {
    let mut tape = Tape::new();
    let bound = match scaling {
        None => bind(&mut tape, params, false),
        Some(omega) => {
            omega.check_aligned(params)?;
            let ov = omega.bind(&mut tape, false);
            bind_scaled(&mut tape, params, &ov)?
        }
    };
    let x = tape.constant(images.clone());
    let out = forward(&mut tape, cfg, &bound, x)?;
    Ok(HeadValues::from_tape(&tape, &out))
}

impl BoundParams {
    pub fn from_map(vars: BTreeMap<String, Var>) -> Self {
        BoundParams { vars }
    }
}
