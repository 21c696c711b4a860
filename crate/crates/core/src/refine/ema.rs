use crate::detector::ParameterSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("alpha", format!("must lie in (0, 1), got {alpha}")))
    }
}

fn zip_sets(a: &ParameterSet, b: &ParameterSet, f: impl Fn(f64, f64) -> f64) -> Result<ParameterSet> {
    a.check_aligned(b)?;
    let mut out = ParameterSet::new();
    for ((name, ta), (_, tb)) in a.iter().zip(b.iter()) {
        out.insert(name.clone(), ta.zip_map(tb, &f)?)?;
    }
    Ok(out)
}

/// `alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_step(teacher: &ParameterSet, student: &ParameterSet, alpha: f64) -> Result<ParameterSet> {
    check_alpha(alpha)?;
    zip_sets(teacher, student, |t, s| alpha * t + (1.0 - alpha) * s)
}

/// Closed form of `n` moving-average steps from `teacher0` over
/// `history[0..n]`: `alpha^n t0 + (1 - alpha) sum_k alpha^(n-1-k) s_k`.
pub fn ema_unrolled(teacher0: &ParameterSet, history: &[ParameterSet], alpha: f64, n: usize) -> Result<ParameterSet> {
    check_alpha(alpha)?;
    if history.len() < n {
        return Err(Error::invalid("history", format!("{} student snapshots for {n} steps", history.len())));
    }
    for h in &history[..n] {
        teacher0.check_aligned(h)?;
    }
    let mut out = ParameterSet::new();
    for (name, t0) in teacher0.iter() {
        let decay = alpha.powi(n as i32);
        let mut data: Vec<f64> = t0.data().iter().map(|v| decay * v).collect();
        for (k, h) in history[..n].iter().enumerate() {
            let w = (1.0 - alpha) * alpha.powi((n - 1 - k) as i32);
            for (d, s) in data.iter_mut().zip(h.get(name)?.data()) {
                *d += w * s;
            }
        }
        out.insert(name.clone(), Tensor::new(t0.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::vector(vec![v]).unwrap()).unwrap();
        p
    }

    fn value(p: &ParameterSet) -> f64 {
        p.get("w").unwrap().data()[0]
    }

    #[test]
    fn step_examples() {
        assert_eq!(value(&ema_step(&single(1.0), &single(0.0), 0.999).unwrap()), 0.999);
        assert_eq!(value(&ema_step(&single(0.3), &single(0.3), 0.7).unwrap()), 0.3);
        let mut t = single(0.0);
        for _ in 0..3 {
            t = ema_step(&t, &single(1.0), 0.5).unwrap();
        }
        assert_eq!(value(&t), 0.875);
    }

    #[test]
    fn alpha_bounds() {
        assert!(ema_step(&single(1.0), &single(0.0), 1.0).is_err());
        assert!(ema_step(&single(1.0), &single(0.0), 0.0).is_err());
    }

    #[test]
    fn unrolled_examples() {
        let one = ema_unrolled(&single(1.0), &[single(0.0)], 0.9, 1).unwrap();
        let step = ema_step(&single(1.0), &single(0.0), 0.9).unwrap();
        assert_eq!(value(&one), value(&step));
        let hist = vec![single(2.0); 7];
        let v = value(&ema_unrolled(&single(0.0), &hist, 0.8, 7).unwrap());
        assert!((v - (1.0 - 0.8f64.powi(7)) * 2.0).abs() < 1e-14);
        assert!(ema_unrolled(&single(0.0), &hist, 0.8, 8).is_err());
    }
}
