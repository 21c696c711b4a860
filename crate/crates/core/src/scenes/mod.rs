//! Procedural scenes: textured rectangles on a noisy background, the
//! labeled/unlabeled/test splits, the weak and strong views, and the dataset
//! container.

mod augment;
mod io;

pub use augment::{flip_scene, strong_augment, weak_augment, CutoutRect, StrongAugConfig, StrongView, WeakView};
pub use io::{decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bbox::{iou, BBox, LabeledBox};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One grayscale image in `[0, 1]` with its objects.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[H, W]`.
    pub image: Tensor,
    pub objects: Vec<LabeledBox>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Object texture per class id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Solid,
    Striped,
    Checker,
}

impl Texture {
    pub fn for_class(class_id: usize) -> Texture {
        match class_id % 3 {
            0 => Texture::Solid,
            1 => Texture::Striped,
            _ => Texture::Checker,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub max_objects: usize,
    pub max_overlap: f64,
    pub background: f64,
    pub background_noise: f64,
    /// Scenes in the held-out test split.
    pub test_count: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            num_classes: 3,
            min_size: 8,
            max_size: 16,
            max_objects: 3,
            max_overlap: 0.3,
            background: 0.15,
            background_noise: 0.05,
            test_count: 100,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.min_size == 0 || self.min_size > self.max_size {
            bad.push(format!("object sizes {}..={} are invalid", self.min_size, self.max_size));
        }
        if self.max_size > self.height || self.max_size > self.width {
            bad.push(format!("max object size {} exceeds image {}x{}", self.max_size, self.height, self.width));
        }
        if self.max_objects == 0 {
            bad.push("max_objects must be positive".into());
        }
        if self.num_classes == 0 {
            bad.push("num_classes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.background) || !(self.background_noise >= 0.0) {
            bad.push("background level must lie in [0, 1] with non-negative noise".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Labeled, unlabeled and test splits. Unlabeled scenes carry no objects.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub labeled: Vec<Scene>,
    pub unlabeled: Vec<Scene>,
    pub test: Vec<Scene>,
}

const TEST_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn sample_layout<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Vec<LabeledBox> {
    let n = rng.gen_range(1..=cfg.max_objects);
    let mut objs: Vec<LabeledBox> = Vec::with_capacity(n);
    let mut attempts = 0;
    while objs.len() < n && attempts < 200 {
        attempts += 1;
        let w = rng.gen_range(cfg.min_size..=cfg.max_size);
        let h = rng.gen_range(cfg.min_size..=cfg.max_size);
        let x = rng.gen_range(0..=cfg.width - w);
        let y = rng.gen_range(0..=cfg.height - h);
        let bbox = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
        if objs.iter().any(|o| iou(&o.bbox, &bbox) > cfg.max_overlap) {
            continue;
        }
        let class_id = rng.gen_range(0..cfg.num_classes);
        objs.push(LabeledBox { class_id, bbox });
    }
    objs
}

fn render<R: Rng>(cfg: &SceneConfig, objects: &[LabeledBox], rng: &mut R) -> Tensor {
    let (h, w) = (cfg.height, cfg.width);
    let mut img = vec![cfg.background; h * w];
    if cfg.background_noise > 0.0 {
        let noise = Normal::new(0.0, cfg.background_noise).expect("non-negative std");
        for v in img.iter_mut() {
            *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    for o in objects {
        let hi = rng.gen_range(0.75..0.95);
        let lo = rng.gen_range(0.35..0.5);
        let (x1, y1) = (o.bbox.x1 as usize, o.bbox.y1 as usize);
        let (x2, y2) = (o.bbox.x2 as usize, o.bbox.y2 as usize);
        for py in y1..y2 {
            for px in x1..x2 {
                let (dx, dy) = (px - x1, py - y1);
                let on = match Texture::for_class(o.class_id) {
                    Texture::Solid => true,
                    Texture::Striped => (dy / 2) % 2 == 0,
                    Texture::Checker => (dx / 2 + dy / 2) % 2 == 0,
                };
                img[py * w + px] = if on { hi } else { lo };
            }
        }
    }
    Tensor::new(vec![h, w], img).expect("rendered pixels are finite")
}

/// One scene from its own RNG stream, so scenes are independent of order.
pub fn generate_scene(cfg: &SceneConfig, seed: u64, index: usize) -> Scene {
    let mut rng = scene_rng(seed, index);
    let objects = sample_layout(cfg, &mut rng);
    let image = render(cfg, &objects, &mut rng);
    Scene { image, objects }
}

/// `count` scenes split into `round(count * ratio)` labeled (at least one)
/// and the rest unlabeled, plus `cfg.test_count` labeled test scenes from a
/// derived seed.
pub fn generate(cfg: &SceneConfig, seed: u64, count: usize, ratio: f64) -> Result<Dataset> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::invalid("count", "must be positive"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("ratio", format!("must lie in (0, 1), got {ratio}")));
    }
    let n_labeled = ((count as f64 * ratio).round() as usize).clamp(1, count);
    let mut labeled = Vec::with_capacity(n_labeled);
    let mut unlabeled = Vec::with_capacity(count - n_labeled);
    for i in 0..count {
        let s = generate_scene(cfg, seed, i);
        if i < n_labeled {
            labeled.push(s);
        } else {
            unlabeled.push(Scene { image: s.image, objects: Vec::new() });
        }
    }
    let test_seed = seed ^ TEST_SEED_SALT;
    let test = (0..cfg.test_count).map(|i| generate_scene(cfg, test_seed, i)).collect();
    Ok(Dataset { height: cfg.height, width: cfg.width, num_classes: cfg.num_classes, labeled, unlabeled, test })
}

/// Stacks `[H, W]` images into `[N, 1, H, W]`.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut hw: Option<(usize, usize)> = None;
    let mut n = 0;
    for img in images {
        let s = img.shape();
        if s.len() != 2 || hw.is_some_and(|d| d != (s[0], s[1])) {
            return Err(Error::shape("stack_images", format!("image {s:?}")));
        }
        hw = Some((s[0], s[1]));
        data.extend_from_slice(img.data());
        n += 1;
    }
    let (h, w) = hw.ok_or_else(|| Error::invalid("images", "empty batch"))?;
    Tensor::new(vec![n, 1, h, w], data)
}
