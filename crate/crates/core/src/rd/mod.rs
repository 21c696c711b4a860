//! Representation disagreement: channel-softmax feature distributions of the
//! two backbone levels, the asymmetric KL between student and teacher, and
//! the student update that descends the pseudo-label loss while ascending
//! the disagreement.

use crate::bbox::LabeledBox;
use crate::detector::{bind, detection_loss, forward, forward_values, DetectorConfig, LossConfig, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::{check_finite, softmax, Tape, Tensor, Var};

/// Per-level `[N, C, H, W]` probabilities over the channel axis.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationDistribution {
    pub levels: [Tensor; 2],
}

impl RepresentationDistribution {
    pub fn batch(&self) -> usize {
        self.levels[0].shape()[0]
    }

    /// Channel distribution of level `level` at image `n`, row `y`, column `x`.
    pub fn at(&self, level: usize, n: usize, y: usize, x: usize) -> Vec<f64> {
        let s = self.levels[level].shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        (0..c).map(|k| self.levels[level].data()[((n * c + k) * h + y) * w + x]).collect()
    }
}

fn unflip_images(t: &Tensor, flips: &[bool]) -> Tensor {
    let n = t.shape()[0];
    let per = t.numel() / n;
    let flipped = t.flip_last_axis();
    let mut data = t.data().to_vec();
    for (i, &f) in flips.iter().enumerate() {
        if f {
            data[i * per..(i + 1) * per].copy_from_slice(&flipped.data()[i * per..(i + 1) * per]);
        }
    }
    Tensor::from_parts(t.shape().to_vec(), data)
}

/// Channel softmax of both feature levels. Images with `flips[i]` set are
/// mirrored back so locations align with the un-flipped frame.
pub fn representation_from_features(features: &[Tensor; 2], flips: &[bool]) -> Result<RepresentationDistribution> {
    let mut levels = Vec::with_capacity(2);
    for f in features {
        if f.ndim() != 4 {
            return Err(Error::shape("representation", format!("expected [N, C, H, W], got {:?}", f.shape())));
        }
        if flips.len() != f.shape()[0] {
            return Err(Error::invalid("flips", format!("{} flags for batch {}", flips.len(), f.shape()[0])));
        }
        levels.push(softmax(&unflip_images(f, flips), 1)?);
    }
    let [a, b]: [Tensor; 2] = levels.try_into().expect("two levels");
    Ok(RepresentationDistribution { levels: [a, b] })
}

/// Gradient-free [`representation_from_features`] of a detector on `images`.
pub fn representation_probs(
    cfg: &DetectorConfig,
    params: &ParameterSet,
    images: &Tensor,
    flips: &[bool],
) -> Result<RepresentationDistribution> {
    let v = forward_values(cfg, params, None, images)?;
    representation_from_features(&v.features, flips)
}

/// `sum_c p log(p / q)` for one location.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::shape("kl_divergence", format!("{} vs {}", p.len(), q.len())));
    }
    if q.iter().any(|&v| v <= 0.0) || p.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("kl_divergence", "distributions must be non-negative with positive reference"));
    }
    let kl = p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * (a / b).ln()).sum();
    check_finite("kl_divergence", &[kl])?;
    Ok(kl)
}

fn check_pair(student: &RepresentationDistribution, teacher: &RepresentationDistribution) -> Result<()> {
    for (a, b) in student.levels.iter().zip(&teacher.levels) {
        if a.shape() != b.shape() {
            return Err(Error::shape("rd_loss", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
    }
    Ok(())
}

/// `KL(p_s || p_t)` averaged over locations within a level, then over the
/// two levels.
pub fn rd_loss_values(student: &RepresentationDistribution, teacher: &RepresentationDistribution) -> Result<f64> {
    check_pair(student, teacher)?;
    let mut total = 0.0;
    for (ps, pt) in student.levels.iter().zip(&teacher.levels) {
        let s = ps.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut level = 0.0;
        for i in 0..n {
            for loc in 0..hw {
                let gather = |t: &Tensor| -> Vec<f64> { (0..c).map(|k| t.data()[(i * c + k) * hw + loc]).collect() };
                level += kl_divergence(&gather(ps), &gather(pt))?;
            }
        }
        total += level / (n * hw) as f64;
    }
    Ok(total / 2.0)
}

/// Tape version of [`rd_loss_values`]: gradients flow into the student
/// features only; the teacher distribution enters as a constant.
pub fn rd_loss(tape: &mut Tape, student_features: &[Var; 2], teacher: &RepresentationDistribution) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&f, pt) in student_features.iter().zip(&teacher.levels) {
        let shape = tape.value(f).shape().to_vec();
        if shape != pt.shape() {
            return Err(Error::shape("rd_loss", format!("{shape:?} vs {:?}", pt.shape())));
        }
        let locations = (shape[0] * shape[2] * shape[3]) as f64;
        let log_ps = tape.log_softmax(f, 1)?;
        let ps = tape.exp(log_ps)?;
        let log_pt = tape.constant(pt.map(f64::ln)?);
        let diff = tape.sub(log_ps, log_pt)?;
        let prod = tape.mul(ps, diff)?;
        let sum = tape.sum(prod)?;
        let level = tape.scale(sum, 0.5 / locations)?;
        total = Some(match total {
            None => level,
            Some(t) => tape.add(t, level)?,
        });
    }
    Ok(total.expect("two levels"))
}

/// Coefficients of the student update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudentStepConfig {
    /// Learning rate.
    pub xi: f64,
    /// Weight of the supervised loss on the labeled part of the batch.
    pub lambda_sup: f64,
    pub lambda_u: f64,
    pub lambda_d: f64,
    /// Keep the boundary-uncertainty terms in the pseudo-label loss.
    pub unsup_uncertainty: bool,
    /// Step along `+grad` of `lambda_u L_unsup - lambda_d L_RD` instead of `-grad`.
    pub gradient_ascent: bool,
}

impl Default for StudentStepConfig {
    fn default() -> Self {
        StudentStepConfig {
            xi: 0.01,
            lambda_sup: 1.0,
            lambda_u: 4.0,
            lambda_d: 0.5,
            unsup_uncertainty: true,
            gradient_ascent: false,
        }
    }
}

/// One student batch. `strong_images` are strong views of unlabeled scenes
/// whose `pseudo_targets` came from the frozen teacher; `teacher_repr` is
/// the teacher distribution on the matching weak views, already un-flipped.
#[derive(Clone, Copy, Debug)]
pub struct StudentBatch<'a> {
    pub labeled: Option<(&'a Tensor, &'a [Vec<LabeledBox>])>,
    pub strong_images: &'a Tensor,
    pub pseudo_targets: &'a [Vec<LabeledBox>],
    pub teacher_repr: Option<&'a RepresentationDistribution>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentStepReport {
    /// `lambda_sup L_sup + lambda_u L_unsup - lambda_d L_RD`.
    pub objective: f64,
    pub loss_sup: Option<f64>,
    pub loss_unsup: Option<f64>,
    pub loss_rd: Option<f64>,
}

/// Builds the combined student objective on `tape`. Terms whose inputs are
/// missing or whose coefficient is zero are skipped; an objective with no
/// terms is rejected.
pub fn student_objective(
    tape: &mut Tape,
    cfg: &DetectorConfig,
    lcfg: &LossConfig,
    student: &crate::detector::BoundParams,
    batch: &StudentBatch<'_>,
    step: &StudentStepConfig,
) -> Result<(Var, StudentStepReport)> {
    let mut report = StudentStepReport { objective: 0.0, loss_sup: None, loss_unsup: None, loss_rd: None };
    let mut terms: Vec<Var> = Vec::new();

    if let (Some((images, targets)), true) = (batch.labeled, step.lambda_sup != 0.0) {
        let x = tape.constant(images.clone());
        let out = forward(tape, cfg, student, x)?;
        let l = detection_loss(tape, cfg, lcfg, &out.heads, targets)?;
        report.loss_sup = Some(tape.value(l.total).item()?);
        terms.push(tape.scale(l.total, step.lambda_sup)?);
    }

    let has_labels = batch.pseudo_targets.iter().any(|t| !t.is_empty());
    let want_unsup = has_labels && step.lambda_u != 0.0;
    let want_rd = batch.teacher_repr.is_some() && step.lambda_d != 0.0;
    if want_unsup || want_rd {
        let x = tape.constant(batch.strong_images.clone());
        let out = forward(tape, cfg, student, x)?;
        if want_unsup {
            let ucfg =
                LossConfig { uncertainty_terms: lcfg.uncertainty_terms && step.unsup_uncertainty, ..lcfg.clone() };
            let l = detection_loss(tape, cfg, &ucfg, &out.heads, batch.pseudo_targets)?;
            report.loss_unsup = Some(tape.value(l.total).item()?);
            terms.push(tape.scale(l.total, step.lambda_u)?);
        }
        if let (true, Some(teacher)) = (want_rd, batch.teacher_repr) {
            let rd = rd_loss(tape, &out.features, teacher)?;
            report.loss_rd = Some(tape.value(rd).item()?);
            terms.push(tape.scale(rd, -step.lambda_d)?);
        }
    }

    let mut iter = terms.into_iter();
    let mut total = iter.next().ok_or_else(|| Error::invalid("batch", "student objective has no terms"))?;
    for t in iter {
        total = tape.add(total, t)?;
    }
    report.objective = tape.value(total).item()?;
    Ok((total, report))
}

/// One SGD step of the student on [`student_objective`].
pub fn student_step(
    cfg: &DetectorConfig,
    lcfg: &LossConfig,
    theta_s: &ParameterSet,
    batch: &StudentBatch<'_>,
    step: &StudentStepConfig,
) -> Result<(ParameterSet, StudentStepReport)> {
    if !(step.xi > 0.0 && step.xi.is_finite()) {
        return Err(Error::invalid("xi", format!("must be positive, got {}", step.xi)));
    }
    let mut tape = Tape::new();
    let bound = bind(&mut tape, theta_s, true);
    let (objective, report) = student_objective(&mut tape, cfg, lcfg, &bound, batch, step)?;
    let grads = tape.backward(objective)?;
    let sign = if step.gradient_ascent { 1.0 } else { -1.0 };
    let mut next = theta_s.clone();
    for (name, t) in next.iter_mut() {
        let v = bound.get(name)?;
        let g = grads.get_or_zeros(v, t.shape());
        *t = t.zip_map(&g, |w, g| w + sign * step.xi * g).map_err(|_| Error::Divergence {
            stage: "SSL".into(),
            iteration: 0,
            detail: format!("non-finite update of {name}"),
        })?;
    }
    Ok((next, report))
}
