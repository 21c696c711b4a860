use super::scaling::{ScalingSet, OMEGA_MIN};
use crate::bbox::LabeledBox;
use crate::detector::{bind_scaled, supervised_loss, BoundParams, DetectorConfig, LossConfig, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct TmrLoss {
    pub total: Var,
    pub teacher: f64,
    pub student: f64,
}

/// `lambda_t * L(theta_t * omega_t) + lambda_s * L(theta_s * omega_s)` with
/// both weight sets frozen. A zero coefficient skips its forward pass.
#[allow(clippy::too_many_arguments)]
pub fn tmr_loss(
    tape: &mut Tape,
    cfg: &DetectorConfig,
    lcfg: &LossConfig,
    theta_t: &ParameterSet,
    omega_t: &BoundParams,
    theta_s: &ParameterSet,
    omega_s: &BoundParams,
    images: Var,
    targets: &[Vec<LabeledBox>],
    lambda: (f64, f64),
) -> Result<TmrLoss> {
    if targets.is_empty() {
        return Err(Error::invalid("batch", "empty batch"));
    }
    let (lambda_t, lambda_s) = lambda;
    let mut parts = Vec::new();
    let mut values = [0.0; 2];
    for (i, (theta, omega, coef)) in
        [(theta_t, omega_t, lambda_t), (theta_s, omega_s, lambda_s)].into_iter().enumerate()
    {
        if coef == 0.0 {
            continue;
        }
        let bound = bind_scaled(tape, theta, omega)?;
        let l = supervised_loss(tape, cfg, lcfg, &bound, images, targets)?;
        values[i] = tape.value(l.total).item()?;
        parts.push(tape.scale(l.total, coef)?);
    }
    let total = match parts.as_slice() {
        [] => {
            let z = tape.constant(Tensor::scalar(0.0));
            tape.scale(z, 1.0)?
        }
        [a] => *a,
        [a, b] => tape.add(*a, *b)?,
        _ => unreachable!(),
    };
    Ok(TmrLoss { total, teacher: values[0], student: values[1] })
}

/// Projected gradient descent on a box `[lo, hi]^n`.
///
/// `f(step, x)` returns the objective and its gradient at `x`. The returned
/// trace holds the objective at every iterate before its update.
pub fn projected_descent<F>(
    x0: Vec<f64>,
    bounds: (f64, f64),
    gamma: f64,
    steps: usize,
    mut f: F,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(usize, &[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid("gamma", format!("must be non-negative, got {gamma}")));
    }
    let (lo, hi) = bounds;
    let mut x = x0;
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grad) = f(step, &x)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                stage: "TMR".into(),
                iteration: step,
                detail: format!("objective {loss}"),
            });
        }
        if grad.len() != x.len() {
            return Err(Error::shape("projected_descent", "gradient length differs from x"));
        }
        trace.push(loss);
        for (xi, g) in x.iter_mut().zip(&grad) {
            *xi = (*xi - gamma * g).clamp(lo, hi);
        }
    }
    Ok((x, trace))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TmrOutcome {
    pub omega_t: ScalingSet,
    pub omega_s: ScalingSet,
    /// Objective before each of the steps.
    pub trace: Vec<f64>,
}

/// `steps` clamped descent updates of both coefficient sets on batches drawn
/// from `batch(step)`. Weight sets are never modified.
#[allow(clippy::too_many_arguments)]
pub fn tmr_optimize<F>(
    cfg: &DetectorConfig,
    lcfg: &LossConfig,
    theta_t: &ParameterSet,
    theta_s: &ParameterSet,
    omega: (ScalingSet, ScalingSet),
    lambda: (f64, f64),
    gamma: f64,
    steps: usize,
    mut batch: F,
) -> Result<TmrOutcome>
where
    F: FnMut(usize) -> Result<(Tensor, Vec<Vec<LabeledBox>>)>,
{
    if steps == 0 {
        return Err(Error::invalid("steps", "need at least one step"));
    }
    let (omega_t, omega_s) = omega;
    theta_t.check_aligned(theta_s)?;
    omega_t.check_aligned(theta_t)?;
    omega_s.check_aligned(theta_s)?;
    let split = omega_t.num_values();
    let mut x0 = omega_t.flatten();
    x0.extend(omega_s.flatten());

    let (x, trace) = projected_descent(x0, (OMEGA_MIN, 1.0), gamma, steps, |step, x| {
        let ot = omega_t.with_values(&x[..split])?;
        let os = omega_s.with_values(&x[split..])?;
        let (images, targets) = batch(step)?;
        let mut tape = Tape::new();
        let vt = ot.bind(&mut tape, true);
        let vs = os.bind(&mut tape, true);
        let img = tape.constant(images);
        let l = tmr_loss(&mut tape, cfg, lcfg, theta_t, &vt, theta_s, &vs, img, &targets, lambda)
            .map_err(|e| Error::Divergence { stage: "TMR".into(), iteration: step, detail: e.to_string() })?;
        let loss = tape.value(l.total).item()?;
        let grads = tape.backward(l.total)?;
        let mut g = Vec::with_capacity(x.len());
        for (set, bound) in [(&ot, &vt), (&os, &vs)] {
            for (name, t) in set.tensors() {
                g.extend(grads.get_or_zeros(bound.get(name)?, t.shape()).into_data());
            }
        }
        Ok((loss, g))
    })?;

    Ok(TmrOutcome { omega_t: omega_t.with_values(&x[..split])?, omega_s: omega_s.with_values(&x[split..])?, trace })
}

/// Channel-wise convex mixing with `m = omega_t / (omega_t + omega_s)`:
/// `teacher' = m t + (1 - m) s`, `student' = (1 - m) t + m s`.
pub fn refine_weights(
    theta_t: &ParameterSet,
    theta_s: &ParameterSet,
    omega_t: &ScalingSet,
    omega_s: &ScalingSet,
) -> Result<(ParameterSet, ParameterSet)> {
    theta_t.check_aligned(theta_s)?;
    omega_t.check_aligned(theta_t)?;
    omega_s.check_aligned(theta_s)?;
    omega_t.check_range()?;
    omega_s.check_range()?;
    let mut new_t = ParameterSet::new();
    let mut new_s = ParameterSet::new();
    for ((name, tt), (_, ts)) in theta_t.iter().zip(theta_s.iter()) {
        let (ct, cs) = (omega_t.get(name)?, omega_s.get(name)?);
        if ct.numel() != cs.numel() {
            return Err(Error::Misaligned(format!("layer `{name}` coefficient counts differ")));
        }
        let per = tt.numel() / ct.numel();
        let mut dt = Vec::with_capacity(tt.numel());
        let mut ds = Vec::with_capacity(tt.numel());
        for (c, (chunk_t, chunk_s)) in tt.data().chunks(per).zip(ts.data().chunks(per)).enumerate() {
            let (wt, ws) = (ct.data()[c], cs.data()[c]);
            let m = wt / (wt + ws);
            for (&a, &b) in chunk_t.iter().zip(chunk_s) {
                if a == b {
                    dt.push(a);
                    ds.push(a);
                } else {
                    dt.push(m * a + (1.0 - m) * b);
                    ds.push((1.0 - m) * a + m * b);
                }
            }
        }
        new_t.insert(name.clone(), Tensor::new(tt.shape().to_vec(), dt)?)?;
        new_s.insert(name.clone(), Tensor::new(ts.shape().to_vec(), ds)?)?;
    }
    Ok((new_t, new_s))
}
