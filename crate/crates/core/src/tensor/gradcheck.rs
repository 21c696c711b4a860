use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`,
    /// after step refinement when enabled
    pub max_rel_error: f64,
    /// Same maximum using the base step only.
    pub raw_max_rel_error: f64,
    /// Coordinates that were re-evaluated with smaller steps.
    pub refined: usize,
    /// `(param index, flat coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

/// Step schedule for [`finite_diff_check_with`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Steps tried, in order, for coordinates whose error at `h` exceeds `refine_above`.
    pub fallback_steps: Vec<f64>,
    pub refine_above: f64,
}

impl GradCheckOptions {
    pub fn strict(h: f64) -> Self {
        GradCheckOptions { h, fallback_steps: Vec::new(), refine_above: f64::INFINITY }
    }

    /// `h` with fallbacks `h/10`, `h/100`, `10h`: smaller steps move the
    /// stencil off a switching point, a larger one lifts tiny gradients above
    /// the roundoff floor of the loss.
    pub fn with_fallbacks(h: f64, refine_above: f64) -> Self {
        GradCheckOptions { h, fallback_steps: vec![h / 10.0, h / 100.0, h * 10.0, h * 100.0, h * 1000.0], refine_above }
    }
}

/// Compares tape gradients of `loss_fn` against central differences with step `h`.
///
/// `loss_fn` receives one `Var` per entry of `params`, in order, and must build
/// a scalar loss. It is called once with leaves and `2 * coords` more times
/// with perturbed constants.
pub fn finite_diff_check<F>(loss_fn: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(loss_fn, params, &GradCheckOptions::strict(h))
}

/// [`finite_diff_check`] with fallback steps for failing coordinates.
///
/// Piecewise-smooth losses (ReLU, max-pool, threshold assignment) are not
/// differentiable at their switching points. When one lies inside the stencil
/// `x +- h` the central difference mixes two pieces. Separately, for
/// coordinates whose gradient is within a few orders of the loss roundoff
/// `eps |L| / h`, the difference measures noise. A wrong analytic gradient
/// keeps failing at every step, so a coordinate's error is the smallest over
/// the tried steps.
pub fn finite_diff_check_with<F>(loss_fn: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let h = opts.h;
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("h", format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = loss_fn(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().zip(params).map(|(&v, p)| grads.get_or_zeros(v, p.shape())).collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let root = loss_fn(&mut tape, &vars)?;
        let v = tape.value(root).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("finite-difference loss".into()));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        raw_max_rel_error: 0.0,
        refined: 0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let orig = p.data()[j];
            let a = analytic[pi].data()[j];
            let mut central = |step: f64| -> Result<(f64, f64)> {
                work[pi].data_mut()[j] = orig + step;
                let up = eval(&work);
                work[pi].data_mut()[j] = orig - step;
                let down = eval(&work);
                work[pi].data_mut()[j] = orig;
                let numeric = (up? - down?) / (2.0 * step);
                Ok((numeric, (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12)))
            };
            let (mut numeric, mut rel) = central(h)?;
            report.raw_max_rel_error = report.raw_max_rel_error.max(rel);
            if rel > opts.refine_above && !opts.fallback_steps.is_empty() {
                report.refined += 1;
            }
            for &step in &opts.fallback_steps {
                if rel <= opts.refine_above {
                    break;
                }
                if !(step > 0.0 && step.is_finite()) {
                    return Err(Error::invalid("fallback_steps", format!("bad step {step}")));
                }
                let (n2, r2) = central(step)?;
                if r2 < rel {
                    numeric = n2;
                    rel = r2;
                }
            }
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, j);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let r = finite_diff_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                let s = tape.sum(sq)?;
                tape.scale(s, 0.5)
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
        assert_eq!(r.coordinates, 2);
    }

    #[test]
    fn linear_is_exact() {
        let p = Tensor::vector(vec![5.0]).unwrap();
        let r = finite_diff_check(
            |tape, v| {
                let y = tape.scale(v[0], 3.0)?;
                tape.sum(y)
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
    }

    #[test]
    fn rejects_non_finite_loss() {
        // log|p| is finite at p = 0.5 but the perturbed evaluation at p - h = 0 is not
        let p = Tensor::vector(vec![0.5]).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let y = tape.abs(v[0])?;
                let l = tape.log(y)?;
                tape.sum(l)
            },
            &[p],
            0.5,
        );
        assert!(matches!(err, Err(Error::NonFinite(_))), "{err:?}");
    }

    #[test]
    fn rejects_bad_step() {
        let p = Tensor::vector(vec![1.0]).unwrap();
        assert!(finite_diff_check(|tape, v| tape.sum(v[0]), &[p], 0.0).is_err());
    }

    #[test]
    fn refinement_steps_off_a_kink() {
        // relu kink at 0 lies inside the stencil of p = 4e-6 with h = 1e-5
        let p = Tensor::vector(vec![4e-6]).unwrap();
        let f = |tape: &mut Tape, v: &[Var]| {
            let r = tape.relu(v[0])?;
            tape.sum(r)
        };
        let strict = finite_diff_check(f, std::slice::from_ref(&p), 1e-5).unwrap();
        assert!(strict.max_rel_error > 0.1);
        let opts = GradCheckOptions::with_fallbacks(1e-5, 1e-4);
        let r = finite_diff_check_with(f, &[p], &opts).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.refined, 1);
        assert_eq!(r.raw_max_rel_error, strict.max_rel_error);
    }

    #[test]
    fn refinement_does_not_hide_wrong_gradients() {
        // analytic gradient of 2x, numeric gradient of 3x: wrong at every step
        let p = Tensor::vector(vec![0.7]).unwrap();
        let opts = GradCheckOptions::with_fallbacks(1e-5, 1e-4);
        let r = finite_diff_check_with(
            |tape, v| {
                let y = tape.scale(v[0], 2.0)?;
                let bump = tape.constant(Tensor::vector(vec![tape.value(v[0]).data()[0]]).unwrap());
                let s = tape.add(y, bump)?;
                tape.sum(s)
            },
            &[p],
            &opts,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.3, "{r:?}");
    }
}
