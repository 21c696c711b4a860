use std::collections::BTreeMap;

use crate::detector::{BoundParams, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Lower clamp of every scaling coefficient.
pub const OMEGA_MIN: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    /// One coefficient per leading-axis slice (output channel, or element of a vector).
    PerChannel,
    /// One coefficient per tensor.
    PerTensor,
}

/// Scaling coefficients aligned by name with a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingSet {
    coeffs: BTreeMap<String, Tensor>,
}

fn lead(t: &Tensor) -> usize {
    t.shape().first().copied().unwrap_or(1)
}

impl ScalingSet {
    pub fn filled(params: &ParameterSet, granularity: Granularity, value: f64) -> Self {
        let coeffs = params
            .iter()
            .map(|(name, t)| {
                let n = match granularity {
                    Granularity::PerChannel => lead(t),
                    Granularity::PerTensor => 1,
                };
                (name.clone(), Tensor::full(&[n], value))
            })
            .collect();
        ScalingSet { coeffs }
    }

    pub fn ones(params: &ParameterSet, granularity: Granularity) -> Self {
        Self::filled(params, granularity, 1.0)
    }

    /// Builds a set from explicit vectors, checking alignment and range.
    pub fn from_map(params: &ParameterSet, coeffs: BTreeMap<String, Tensor>) -> Result<Self> {
        let s = ScalingSet { coeffs };
        s.check_aligned(params)?;
        s.check_range()?;
        Ok(s)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.coeffs.get(name).ok_or_else(|| Error::Misaligned(format!("no coefficients for layer `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.coeffs.iter()
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.coeffs.values().map(Tensor::numel).sum()
    }

    /// Names match the parameter set and every vector has one entry per
    /// leading slice or a single entry.
    pub fn check_aligned(&self, params: &ParameterSet) -> Result<()> {
        if self.coeffs.len() != params.len() {
            return Err(Error::Misaligned(format!(
                "{} coefficient vectors for {} layers",
                self.coeffs.len(),
                params.len()
            )));
        }
        for ((cn, c), (pn, p)) in self.coeffs.iter().zip(params.iter()) {
            if cn != pn {
                return Err(Error::Misaligned(format!("coefficients `{cn}` vs layer `{pn}`")));
            }
            if c.ndim() != 1 || (c.numel() != lead(p) && c.numel() != 1) {
                return Err(Error::Misaligned(format!(
                    "layer `{pn}` {:?} with coefficients {:?}",
                    p.shape(),
                    c.shape()
                )));
            }
        }
        Ok(())
    }

    /// Every coefficient lies in `[OMEGA_MIN, 1]`.
    pub fn check_range(&self) -> Result<()> {
        for (name, c) in &self.coeffs {
            if let Some(v) = c.data().iter().find(|v| !(OMEGA_MIN..=1.0).contains(*v)) {
                return Err(Error::invalid(
                    "omega",
                    format!("layer `{name}` has coefficient {v} outside [{OMEGA_MIN}, 1]"),
                ));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .coeffs
            .iter()
            .map(|(n, t)| {
                let v = if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        BoundParams::from_map(vars)
    }

    /// Concatenated values in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.coeffs.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.num_values() {
            return Err(Error::shape(
                "scaling",
                format!("{} values for {} coefficients", values.len(), self.num_values()),
            ));
        }
        let mut off = 0;
        let mut coeffs = BTreeMap::new();
        for (name, t) in &self.coeffs {
            let n = t.numel();
            coeffs.insert(name.clone(), Tensor::new(vec![n], values[off..off + n].to_vec())?);
            off += n;
        }
        Ok(ScalingSet { coeffs })
    }

    pub(crate) fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.coeffs
    }
}
