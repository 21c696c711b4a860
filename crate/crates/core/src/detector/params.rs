use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::DetectorConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named weight tensors of one model, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    layers: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a layer; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.layers.contains_key(&name) {
            return Err(Error::invalid("name", format!("duplicate layer `{name}`")));
        }
        self.layers.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.layers.get(name).ok_or_else(|| Error::Misaligned(format!("missing layer `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.layers.get_mut(name).ok_or_else(|| Error::Misaligned(format!("missing layer `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.layers.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.layers.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.layers.values().map(Tensor::numel).sum()
    }

    /// Checks identical names and shapes.
    pub fn check_aligned(&self, other: &ParameterSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Misaligned(format!("{} layers vs {}", self.layers.len(), other.layers.len())));
        }
        for ((na, ta), (nb, tb)) in self.layers.iter().zip(&other.layers) {
            if na != nb {
                return Err(Error::Misaligned(format!("layer `{na}` vs `{nb}`")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Misaligned(format!("layer `{na}`: {:?} vs {:?}", ta.shape(), tb.shape())));
            }
        }
        Ok(())
    }

    /// FNV-1a over names, shapes and value bits. Equal sets hash equal.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in &self.layers {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Largest absolute elementwise difference across all layers.
    pub fn max_abs_diff(&self, other: &ParameterSet) -> Result<f64> {
        self.check_aligned(other)?;
        let mut m: f64 = 0.0;
        for ((_, a), (_, b)) in self.layers.iter().zip(&other.layers) {
            m = m.max(a.max_abs_diff(b)?);
        }
        Ok(m)
    }
}

/// Layer names and shapes the configuration calls for.
pub fn layer_names(cfg: &DetectorConfig) -> Vec<(String, Vec<usize>)> {
    let k = cfg.kernel;
    let mut out = vec![
        ("backbone.conv1.weight".into(), vec![cfg.c1, cfg.in_channels, k, k]),
        ("backbone.conv1.bias".into(), vec![cfg.c1]),
        ("backbone.conv2.weight".into(), vec![cfg.c2, cfg.c1, k, k]),
        ("backbone.conv2.bias".into(), vec![cfg.c2]),
        ("head.objectness.weight".into(), vec![2, cfg.c2]),
        ("head.objectness.bias".into(), vec![2]),
        ("head.rpn_box.weight".into(), vec![4, cfg.c2]),
        ("head.rpn_box.bias".into(), vec![4]),
    ];
    for s in 1..=cfg.num_stages() {
        out.push((format!("head.stage{s}.cls.weight"), vec![cfg.num_classes + 1, cfg.c2]));
        out.push((format!("head.stage{s}.cls.bias"), vec![cfg.num_classes + 1]));
        out.push((format!("head.stage{s}.box.weight"), vec![4, cfg.c2]));
        out.push((format!("head.stage{s}.box.bias"), vec![4]));
        if cfg.uncertainty {
            out.push((format!("head.stage{s}.spread.weight"), vec![4, cfg.c2]));
            out.push((format!("head.stage{s}.spread.bias"), vec![4]));
        }
    }
    out
}

/// He-normal convolutions, small head weights, and biases set so that the
/// untrained net predicts rare objects, confident background, anchor boxes
/// and unit spreads.
pub fn init_params<R: Rng + ?Sized>(cfg: &DetectorConfig, rng: &mut R) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut set = ParameterSet::new();
    let unit_spread_bias = ((1.0 - cfg.spread_floor).exp() - 1.0).ln();
    for (name, shape) in layer_names(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if name.ends_with(".weight") {
            let std = if name.starts_with("backbone.") {
                let fan_in: usize = shape[1..].iter().product();
                (2.0 / fan_in as f64).sqrt()
            } else {
                0.01
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| normal.sample(rng)).collect()
        } else if name == "head.objectness.bias" {
            vec![0.0, -2.2]
        } else if name.ends_with(".cls.bias") {
            let mut b = vec![0.0; n];
            b[n - 1] = 2.0;
            b
        } else if name.ends_with(".spread.bias") {
            vec![unit_spread_bias; n]
        } else {
            vec![0.0; n]
        };
        set.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_set_follows_flags() {
        let mut cfg = DetectorConfig::default();
        assert_eq!(layer_names(&cfg).len(), 12);
        cfg.cascade = true;
        cfg.uncertainty = true;
        assert_eq!(layer_names(&cfg).len(), 8 + 3 * 6);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = DetectorConfig::default();
        let a = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        a.check_aligned(&c).unwrap();
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterSet::new();
        s.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn misalignment_is_reported() {
        let mut a = ParameterSet::new();
        a.insert("w", Tensor::zeros(&[2])).unwrap();
        let mut b = ParameterSet::new();
        b.insert("w", Tensor::zeros(&[3])).unwrap();
        assert!(matches!(a.check_aligned(&b), Err(Error::Misaligned(_))));
    }
}
