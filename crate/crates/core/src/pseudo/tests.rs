use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::detector::{init_params, Detector, DetectorConfig};
use crate::scenes::{flip_scene, generate_scene, Scene, SceneConfig};
use crate::tensor::Tensor;

fn det(class_id: usize, b: [f64; 4], score: f64) -> Detection {
    Detection { bbox: BBox::from_array(b), class_id, score, spread: [1.0, 2.0, 3.0, 4.0] }
}

/// Emits the same detections for every image.
struct Constant(Vec<Detection>);

impl Predictor for Constant {
    fn predict(&self, images: &Tensor) -> Result<Vec<Vec<Detection>>> {
        Ok(vec![self.0.clone(); images.shape()[0]])
    }
}

/// Recognizes one scene (or its mirror image) pixel-for-pixel and reports its
/// boxes in the frame of the image it was shown.
struct Lookup(Scene);

impl Predictor for Lookup {
    fn predict(&self, images: &Tensor) -> Result<Vec<Vec<Detection>>> {
        let n = images.shape()[0];
        let px = images.numel() / n;
        let flipped = flip_scene(&self.0);
        Ok((0..n)
            .map(|i| {
                let img = &images.data()[i * px..(i + 1) * px];
                let source = if img == self.0.image.data() {
                    &self.0
                } else if img == flipped.image.data() {
                    &flipped
                } else {
                    return Vec::new();
                };
                source
                    .objects
                    .iter()
                    .map(|o| Detection { bbox: o.bbox, class_id: o.class_id, score: 0.95, spread: [1.0; 4] })
                    .collect()
            })
            .collect())
    }
}

fn view(scene: &Scene, flip: bool) -> WeakView {
    if flip {
        WeakView { scene: flip_scene(scene), flip_applied: true }
    } else {
        WeakView { scene: scene.clone(), flip_applied: false }
    }
}

#[test]
fn flipped_detection_maps_to_base_frame() {
    let scene = Scene { image: Tensor::zeros(&[64, 64]), objects: vec![] };
    let teacher = Constant(vec![det(0, [44.0, 3.0, 54.0, 9.0], 0.9)]);
    let out = infer_teacher(&teacher, &[view(&scene, true), view(&scene, false)]).unwrap();
    assert_eq!(out[0][0].bbox, BBox::new(10.0, 3.0, 20.0, 9.0));
    assert_eq!(out[0][0].spread, [3.0, 2.0, 1.0, 4.0]);
    assert_eq!(out[1][0].bbox, BBox::new(44.0, 3.0, 54.0, 9.0));
}

#[test]
fn perfect_teacher_reproduces_truth_in_both_frames() {
    let cfg = SceneConfig::default();
    for i in 0..10 {
        let scene = generate_scene(&cfg, 5, i);
        let teacher = Lookup(scene.clone());
        let views = [view(&scene, false), view(&scene, true)];
        let labels = pseudo_label(&teacher, &views, &PseudoConfig::default()).unwrap();
        for per_view in &labels {
            assert_eq!(per_view.len(), scene.objects.len());
            for o in &scene.objects {
                let hit = per_view.iter().any(|l| l.class_id == o.class_id && l.bbox.max_abs_diff(&o.bbox) <= 1.0);
                assert!(hit, "scene {i}: {o:?} missing from {per_view:?}");
            }
        }
        for (a, b) in labels[0].iter().zip(&labels[1]) {
            assert!(a.bbox.max_abs_diff(&b.bbox) <= 1.0);
        }
    }
}

#[test]
fn initialized_teacher_is_silent_on_empty_scene() {
    let cfg = DetectorConfig::default();
    let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let scene = Scene { image: Tensor::full(&[64, 64], 0.15), objects: vec![] };
    let teacher = Detector { cfg: &cfg, params: &params };
    let raw = infer_teacher(&teacher, &[view(&scene, false)]).unwrap();
    assert!(!raw[0].is_empty());
    let labels = pseudo_label(&teacher, &[view(&scene, false)], &PseudoConfig::default()).unwrap();
    assert!(labels[0].is_empty());
}

#[test]
fn filter_examples() {
    let disjoint = vec![
        det(0, [0.0, 0.0, 10.0, 10.0], 0.9),
        det(1, [20.0, 0.0, 30.0, 10.0], 0.6),
        det(2, [40.0, 0.0, 50.0, 10.0], 0.4),
    ];
    assert_eq!(filter(disjoint.clone(), 0.7, 0.5).unwrap().len(), 1);
    assert_eq!(filter(disjoint, 0.0, 0.5).unwrap().len(), 3);

    // IoU 0.8: second box is (0,0,10,8) inside (0,0,10,10)
    let overlapping = vec![det(0, [0.0, 0.0, 10.0, 8.0], 0.85), det(0, [0.0, 0.0, 10.0, 10.0], 0.9)];
    let kept = filter(overlapping, 0.0, 0.5).unwrap();
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].confidence, 0.9);
}

#[test]
fn filter_rejects_bad_thresholds() {
    assert!(filter(vec![], 1.5, 0.5).is_err());
    assert!(filter(vec![], 0.5, -0.1).is_err());
}

#[test]
fn nms_class_awareness() {
    let d = vec![det(0, [0.0, 0.0, 10.0, 10.0], 0.9), det(1, [0.0, 0.0, 10.0, 10.0], 0.8)];
    assert_eq!(nms(d.clone(), 0.5, true).len(), 2);
    assert_eq!(nms(d, 0.5, false).len(), 1);
}

fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((0usize..3, 0.0..50.0f64, 0.0..50.0f64, 2.0..14.0f64, 2.0..14.0f64, 0.0..=1.0f64), 0..30)
        .prop_map(|v| v.into_iter().map(|(c, x, y, w, h, s)| det(c, [x, y, x + w, y + h], s)).collect())
}

proptest! {
    #[test]
    fn filter_is_monotone_in_threshold(d in arb_dets(), t1 in 0.0..=1.0f64, t2 in 0.0..=1.0f64) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = filter(d.clone(), lo, 0.5).unwrap();
        let b = filter(d, hi, 0.5).unwrap();
        prop_assert!(a.len() >= b.len());
        prop_assert!(b.iter().all(|l| l.confidence >= hi));
    }
}
