//! Dense-grid detector with a proposal branch, up to three cascade stages and
//! an optional per-boundary uncertainty head.
//!
//! Every stage-2 feature cell predicts objectness, a proposal box refined
//! from a fixed cell anchor, and per stage `k` a `K + 1`-way class logit
//! (background last), a box delta applied to the stage `k - 1` box and,
//! with uncertainty enabled, four positive spreads.

mod assign;
mod decode;
mod forward;
mod loss;
pub mod losses;
mod params;

pub use assign::{assign_positives, proposal_positives};
pub use decode::{decode, Detection, Detector, Predictor};
pub use forward::{
    anchors, backbone, bind, bind_scaled, forward, forward_values, heads, BoundParams, ForwardOutput, HeadOutputs,
    HeadValues,
};
pub use loss::{detection_loss, supervised_loss, LossBreakdown, LossConfig};
pub use params::{init_params, layer_names, ParameterSet};

use crate::error::{Error, Result};

/// Sizes of the detector. Feature grid stride is fixed at 4 (two 2x2 pools).
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub in_channels: usize,
    pub c1: usize,
    pub c2: usize,
    /// Odd square kernel size of both convolutions.
    pub kernel: usize,
    pub num_classes: usize,
    pub cascade: bool,
    pub uncertainty: bool,
    /// Side of the square default box centred on every cell, in pixels.
    pub anchor_size: f64,
    /// Added to every predicted spread, in stride units.
    pub spread_floor: f64,
}

pub const STRIDE: usize = 4;

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_h: 64,
            image_w: 64,
            in_channels: 1,
            c1: 8,
            c2: 16,
            kernel: 5,
            num_classes: 3,
            cascade: false,
            uncertainty: false,
            anchor_size: 12.0,
            spread_floor: 0.05,
        }
    }
}

impl DetectorConfig {
    pub fn grid_h(&self) -> usize {
        self.image_h / STRIDE
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / STRIDE
    }

    pub fn cells(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn num_stages(&self) -> usize {
        if self.cascade {
            3
        } else {
            1
        }
    }

    /// Box deltas and spreads are expressed in units of the stride.
    pub fn box_scale(&self) -> f64 {
        STRIDE as f64
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.image_h == 0 || !self.image_h.is_multiple_of(STRIDE) {
            bad.push(format!("image_h={} must be a positive multiple of {STRIDE}", self.image_h));
        }
        if self.image_w == 0 || !self.image_w.is_multiple_of(STRIDE) {
            bad.push(format!("image_w={} must be a positive multiple of {STRIDE}", self.image_w));
        }
        if self.in_channels == 0 || self.c1 == 0 || self.c2 == 0 {
            bad.push("channel counts must be positive".to_string());
        }
        if self.kernel.is_multiple_of(2) {
            bad.push(format!("kernel={} must be odd", self.kernel));
        }
        if self.num_classes == 0 {
            bad.push("num_classes must be positive".to_string());
        }
        if !(self.anchor_size > 0.0) {
            bad.push(format!("anchor_size={} must be positive", self.anchor_size));
        }
        if !(self.spread_floor > 0.0) {
            bad.push(format!("spread_floor={} must be positive", self.spread_floor));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}
