//! Scalar reference forms of the detection losses.
//!
//! The tape-based loss in [`super::loss`] composes the same formulas from
//! primitives; these plain versions serve callers without a tape and act as
//! the term-by-term reference in tests.

use crate::error::{Error, Result};
use crate::tensor::softmax_slice;

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::invalid("target", format!("class {target} out of range for {} logits", logits.len())));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[target])
}

/// Summed smooth-L1 over coordinates.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("smooth_l1", format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| crate::tensor::tape_smooth_l1(p - t)).sum())
}

/// `-alpha (1 - p)^gamma ln p` for the probability assigned to the true class.
pub fn focal_loss(prob_true: f64, alpha: f64, gamma: f64) -> Result<f64> {
    if !(prob_true > 0.0 && prob_true <= 1.0) {
        return Err(Error::invalid("prob_true", format!("must lie in (0, 1], got {prob_true}")));
    }
    Ok(-alpha * (1.0 - prob_true).powf(gamma) * prob_true.ln())
}

/// Focal loss on softmax probabilities of `logits`.
pub fn focal_from_logits(logits: &[f64], target: usize, alpha: f64, gamma: f64) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::invalid("target", format!("class {target} out of range")));
    }
    let ln_p = -cross_entropy(logits, target)?;
    let p = ln_p.exp();
    Ok(-alpha * (1.0 - p).powf(gamma) * ln_p)
}

/// Uncertainty-aware boundary loss: `rho * (|t - p| / s + ln(2 s))` summed
/// over boundaries. A power-weighted Laplace negative log-likelihood.
pub fn npll_standin(pred: &[f64], spread: &[f64], target: &[f64], rho: f64) -> Result<f64> {
    if pred.len() != spread.len() || pred.len() != target.len() {
        return Err(Error::shape("npll_standin", "pred, spread and target lengths differ"));
    }
    if let Some(s) = spread.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::invalid("spread", format!("must be positive, got {s}")));
    }
    Ok(pred.iter().zip(spread).zip(target).map(|((p, s), t)| rho * ((t - p).abs() / s + (2.0 * s).ln())).sum())
}

/// Probability vector of a logit row; re-exported for decoding code.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    softmax_slice(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn cross_entropy_examples() {
        assert!(cross_entropy(&[50.0, -50.0], 0).unwrap() < 1e-40);
        assert!((cross_entropy(&[0.0, 0.0], 0).unwrap() - LN2).abs() < 1e-15);
        // probs [0.25, 0.75]
        let l = cross_entropy(&[0.25f64.ln(), 0.75f64.ln()], 1).unwrap();
        assert!((l - 0.287_682_072_451_780_9).abs() < 1e-12);
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(&[1.0], &[1.0]).unwrap(), 0.0);
        assert_eq!(smooth_l1(&[0.5], &[0.0]).unwrap(), 0.125);
        assert_eq!(smooth_l1(&[2.0], &[0.0]).unwrap(), 1.5);
        assert!(smooth_l1(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn focal_examples() {
        assert_eq!(focal_loss(1.0, 0.25, 2.0).unwrap(), 0.0);
        let v = focal_loss(0.5, 0.25, 2.0).unwrap();
        assert!((v - 0.25 * 0.25 * LN2).abs() < 1e-15);
        assert!((v - 0.04332).abs() < 1e-5);
        let p: f64 = 0.3;
        assert!((focal_loss(p, 1.0, 0.0).unwrap() + p.ln()).abs() < 1e-15);
        assert!(focal_loss(0.0, 0.25, 2.0).is_err());
    }

    #[test]
    fn npll_examples() {
        assert_eq!(npll_standin(&[3.0], &[0.5], &[3.0], 1.0).unwrap(), 0.0);
        assert!((npll_standin(&[3.0], &[1.0], &[3.0], 1.0).unwrap() - LN2).abs() < 1e-15);
        let v = npll_standin(&[0.0], &[1.0], &[1.0], 0.25).unwrap();
        assert!((v - 0.25 * (1.0 + LN2)).abs() < 1e-15);
        assert!((v - 0.4233).abs() < 1e-4);
        assert!(npll_standin(&[0.0], &[0.0], &[1.0], 0.25).is_err());
        assert!(npll_standin(&[0.0], &[-1.0], &[1.0], 0.25).is_err());
    }

    #[test]
    fn npll_lower_bound() {
        let floor = 0.05;
        let rho = 0.25;
        for s in [floor, 0.1, 0.5, 2.0] {
            for d in [0.0, 0.3, 4.0] {
                let v = npll_standin(&[0.0], &[s], &[d], rho).unwrap();
                assert!(v >= rho * (2.0 * floor).ln() - 1e-15);
            }
        }
    }
}
