use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Scene;
use crate::tensor::Tensor;

/// Horizontal mirror of image and boxes.
pub fn flip_scene(scene: &Scene) -> Scene {
    let w = scene.width() as f64;
    Scene {
        image: scene.image.flip_last_axis(),
        objects: scene
            .objects
            .iter()
            .map(|o| crate::bbox::LabeledBox { class_id: o.class_id, bbox: o.bbox.flip_horizontal(w) })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeakView {
    pub scene: Scene,
    pub flip_applied: bool,
}

/// Flips with probability 0.5.
pub fn weak_augment<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> WeakView {
    if rng.gen_bool(0.5) {
        WeakView { scene: flip_scene(scene), flip_applied: true }
    } else {
        WeakView { scene: scene.clone(), flip_applied: false }
    }
}

/// Photometric strengths. A zero strength disables its operation.
#[derive(Clone, Debug, PartialEq)]
pub struct StrongAugConfig {
    /// Additive offset drawn from `[-b, b]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - c, 1 + c]` around the image mean.
    pub contrast: f64,
    pub noise_std: f64,
    /// Cutout side lengths are drawn from `[cutout_min, cutout_max]`; zero max disables it.
    pub cutout_min: usize,
    pub cutout_max: usize,
    pub cutout_fill: f64,
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        StrongAugConfig {
            brightness: 0.2,
            contrast: 0.2,
            noise_std: 0.03,
            cutout_min: 4,
            cutout_max: 12,
            cutout_fill: 0.5,
        }
    }
}

impl StrongAugConfig {
    pub fn identity() -> Self {
        StrongAugConfig {
            brightness: 0.0,
            contrast: 0.0,
            noise_std: 0.0,
            cutout_min: 0,
            cutout_max: 0,
            cutout_fill: 0.5,
        }
    }
}

/// Pixel rectangle `[x, x + w) x [y, y + h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutoutRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrongView {
    pub scene: Scene,
    pub cutout: Option<CutoutRect>,
}

/// Brightness, contrast, Gaussian noise, one cutout, then clamp to `[0, 1]`.
/// Boxes are never changed.
pub fn strong_augment<R: Rng + ?Sized>(scene: &Scene, cfg: &StrongAugConfig, rng: &mut R) -> StrongView {
    let (h, w) = (scene.height(), scene.width());
    let mut px = scene.image.data().to_vec();
    if cfg.brightness > 0.0 {
        let b = rng.gen_range(-cfg.brightness..=cfg.brightness);
        px.iter_mut().for_each(|v| *v += b);
    }
    if cfg.contrast > 0.0 {
        let c = rng.gen_range(1.0 - cfg.contrast..=1.0 + cfg.contrast);
        let mean = px.iter().sum::<f64>() / px.len() as f64;
        px.iter_mut().for_each(|v| *v = (*v - mean) * c + mean);
    }
    if cfg.noise_std > 0.0 {
        let n = Normal::new(0.0, cfg.noise_std).expect("positive std");
        px.iter_mut().for_each(|v| *v += n.sample(rng));
    }
    let mut cutout = None;
    if cfg.cutout_max > 0 {
        let lo = cfg.cutout_min.max(1).min(cfg.cutout_max);
        let cw = rng.gen_range(lo..=cfg.cutout_max).min(w);
        let ch = rng.gen_range(lo..=cfg.cutout_max).min(h);
        let x = rng.gen_range(0..=w - cw);
        let y = rng.gen_range(0..=h - ch);
        for yy in y..y + ch {
            px[yy * w + x..yy * w + x + cw].iter_mut().for_each(|v| *v = cfg.cutout_fill);
        }
        cutout = Some(CutoutRect { x, y, w: cw, h: ch });
    }
    let changed = cfg.brightness > 0.0 || cfg.contrast > 0.0 || cfg.noise_std > 0.0 || cutout.is_some();
    let image = if changed {
        px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Tensor::new(scene.image.shape().to_vec(), px).expect("finite pixels")
    } else {
        scene.image.clone()
    };
    StrongView { scene: Scene { image, objects: scene.objects.clone() }, cutout }
}
