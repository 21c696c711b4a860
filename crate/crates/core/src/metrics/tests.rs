use proptest::prelude::*;

use super::*;
use crate::tensor::Tensor;

fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2)
}

fn sb(image: usize, score: f64, bbox: BBox) -> ScoredBox {
    ScoredBox { image, score, bbox }
}

fn d(class_id: usize, score: f64, bbox: BBox) -> Detection {
    Detection { bbox, class_id, score, spread: [1.0; 4] }
}

fn lb(class_id: usize, bbox: BBox) -> LabeledBox {
    LabeledBox { class_id, bbox }
}

// Exhaustive oracle. Enumerates every partial one-to-one assignment of ranked
// detections to same-image ground truths with IoU >= threshold and keeps the
// lexicographically best by per-rank key (matched, IoU, -gt index). The AP is
// the integral of the interpolated precision p(r) = max{p_i : r_i >= r}.
fn oracle_ap(dets: &[ScoredBox], truths: &[Vec<BBox>], threshold: f64) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let ranked: Vec<ScoredBox> = order.iter().map(|&i| dets[i]).collect();

    type Key = Vec<(u8, f64, i64)>;
    #[allow(clippy::too_many_arguments)]
    fn search(
        k: usize,
        ranked: &[ScoredBox],
        truths: &[Vec<BBox>],
        threshold: f64,
        used: &mut Vec<(usize, usize)>,
        key: &mut Key,
        best: &mut Option<(Key, Vec<bool>)>,
        flags: &mut Vec<bool>,
    ) {
        if k == ranked.len() {
            let better = match best {
                None => true,
                Some((bk, _)) => key
                    .iter()
                    .zip(bk.iter())
                    .find(|(a, b)| a != b)
                    .is_some_and(|(a, b)| a.partial_cmp(b) == Some(std::cmp::Ordering::Greater)),
            };
            if better {
                *best = Some((key.clone(), flags.clone()));
            }
            return;
        }
        let det = ranked[k];
        key.push((0, 0.0, 0));
        flags.push(false);
        search(k + 1, ranked, truths, threshold, used, key, best, flags);
        key.pop();
        flags.pop();
        for (j, g) in truths[det.image].iter().enumerate() {
            let v = iou(&det.bbox, g);
            if v < threshold || used.contains(&(det.image, j)) {
                continue;
            }
            used.push((det.image, j));
            key.push((1, v, -(j as i64)));
            flags.push(true);
            search(k + 1, ranked, truths, threshold, used, key, best, flags);
            used.pop();
            key.pop();
            flags.pop();
        }
    }
    let mut best = None;
    search(0, &ranked, truths, threshold, &mut Vec::new(), &mut Vec::new(), &mut best, &mut Vec::new());
    let flags = best.map(|(_, f)| f).unwrap_or_default();

    let n: usize = truths.iter().map(Vec::len).sum();
    if n == 0 {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let mut points = Vec::new();
    let mut tp = 0.0;
    for (i, &hit) in flags.iter().enumerate() {
        if hit {
            tp += 1.0;
        }
        points.push((tp / n as f64, tp / (i + 1) as f64));
    }
    let mut area = 0.0;
    let mut prev_r = 0.0;
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
    recalls.dedup();
    for r in recalls {
        if r <= prev_r {
            continue;
        }
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        area += (r - prev_r) * p;
        prev_r = r;
    }
    area
}

// Five images, two classes, with duplicates, a near miss, an unmatched class
// and an image without objects.
fn fixture() -> (Vec<Vec<Detection>>, Vec<Vec<LabeledBox>>) {
    let truths = vec![
        vec![lb(0, b(0.0, 0.0, 10.0, 10.0)), lb(1, b(20.0, 20.0, 32.0, 30.0))],
        vec![lb(0, b(5.0, 5.0, 15.0, 15.0)), lb(0, b(8.0, 5.0, 18.0, 15.0))],
        vec![lb(1, b(30.0, 30.0, 40.0, 44.0))],
        vec![],
        vec![lb(0, b(40.0, 0.0, 52.0, 12.0)), lb(1, b(0.0, 40.0, 9.0, 52.0))],
    ];
    let predictions = vec![
        vec![
            d(0, 0.92, b(0.0, 0.0, 10.0, 10.0)),
            d(0, 0.41, b(1.0, 1.0, 11.0, 11.0)),
            d(1, 0.77, b(21.0, 20.0, 32.0, 31.0)),
        ],
        vec![
            d(0, 0.88, b(6.0, 5.0, 16.0, 15.0)),
            d(0, 0.63, b(8.0, 6.0, 18.0, 15.0)),
            d(1, 0.30, b(5.0, 5.0, 15.0, 15.0)),
        ],
        vec![d(1, 0.85, b(31.0, 32.0, 40.0, 44.0)), d(0, 0.50, b(30.0, 30.0, 40.0, 44.0))],
        vec![d(0, 0.70, b(10.0, 10.0, 20.0, 20.0))],
        vec![d(0, 0.55, b(43.0, 2.0, 55.0, 14.0)), d(1, 0.66, b(0.0, 38.0, 9.0, 50.0))],
    ];
    (predictions, truths)
}

fn per_class(pred: &[Vec<Detection>], truths: &[Vec<LabeledBox>], c: usize) -> (Vec<ScoredBox>, Vec<Vec<BBox>>) {
    let dets = pred
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().filter(|x| x.class_id == c).map(move |x| sb(i, x.score, x.bbox)))
        .collect();
    let gts = truths.iter().map(|ts| ts.iter().filter(|t| t.class_id == c).map(|t| t.bbox).collect()).collect();
    (dets, gts)
}

#[test]
fn iou_examples() {
    assert_eq!(iou(&b(0.0, 0.0, 2.0, 2.0), &b(0.0, 0.0, 2.0, 2.0)), 1.0);
    assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(2.0, 2.0, 3.0, 3.0)), 0.0);
    assert!((iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
    assert_eq!(iou(&b(0.0, 0.0, 0.0, 2.0), &b(0.0, 0.0, 2.0, 2.0)), 0.0);
}

#[test]
fn ap_examples() {
    let g = vec![vec![b(0.0, 0.0, 10.0, 10.0)]];
    assert_eq!(average_precision(&[sb(0, 0.9, g[0][0])], &g, 0.5).unwrap(), 1.0);
    let ranked = [sb(0, 0.95, b(30.0, 30.0, 40.0, 40.0)), sb(0, 0.90, g[0][0])];
    assert_eq!(average_precision(&ranked, &g, 0.5).unwrap(), 0.5);
    let g2 = vec![vec![b(0.0, 0.0, 10.0, 10.0), b(20.0, 0.0, 30.0, 10.0)]];
    let two = [sb(0, 0.9, g2[0][0]), sb(0, 0.8, g2[0][1])];
    assert_eq!(average_precision(&two, &g2, 0.5).unwrap(), 1.0);
}

#[test]
fn ap_without_truths() {
    let empty: Vec<Vec<BBox>> = vec![vec![]];
    assert_eq!(average_precision(&[], &empty, 0.5).unwrap(), 1.0);
    assert_eq!(average_precision(&[sb(0, 0.5, b(0.0, 0.0, 1.0, 1.0))], &empty, 0.5).unwrap(), 0.0);
}

#[test]
fn ap_rejects_bad_inputs() {
    let g = vec![vec![b(0.0, 0.0, 10.0, 10.0)]];
    assert!(average_precision(&[sb(1, 0.5, g[0][0])], &g, 0.5).is_err());
    assert!(average_precision(&[sb(0, f64::NAN, g[0][0])], &g, 0.5).is_err());
}

#[test]
fn matching_prefers_highest_iou_then_lower_index() {
    let g = vec![vec![b(0.0, 0.0, 10.0, 10.0), b(0.0, 0.0, 10.0, 10.0), b(2.0, 0.0, 12.0, 10.0)]];
    // exact copies of gt 0 and 1: tie goes to gt 0, the second detection gets gt 1
    let dets =
        [sb(0, 0.9, b(0.0, 0.0, 10.0, 10.0)), sb(0, 0.8, b(0.0, 0.0, 10.0, 10.0)), sb(0, 0.7, b(0.0, 0.0, 10.0, 10.0))];
    assert_eq!(greedy_match(&dets, &g, 0.5), vec![true, true, true]);
    assert_eq!(greedy_match(&dets, &g, 0.9), vec![true, true, false]);
}

#[test]
fn fixture_matches_exhaustive_oracle() {
    let (pred, truths) = fixture();
    let res = evaluate(&pred, &truths, 3).unwrap();
    for c in 0..3 {
        let (dets, gts) = per_class(&pred, &truths, c);
        for (t, &thr) in IOU_GRID.iter().enumerate() {
            assert_eq!(res.ap[c][t], oracle_ap(&dets, &gts, thr), "class {c} iou {thr}");
        }
    }
    // class 2 has neither truths nor detections
    assert_eq!(res.ap[2], vec![1.0; 10]);
    assert!(res.ap[0][0] < 1.0 && res.ap[0][0] > 0.0);
    assert!(res.map <= res.ap.iter().flatten().cloned().fold(0.0, f64::max));
}

#[test]
fn perfect_and_silent_models() {
    let (_, truths) = fixture();
    let perfect: Vec<Vec<Detection>> =
        truths.iter().map(|ts| ts.iter().map(|t| d(t.class_id, 0.9, t.bbox)).collect()).collect();
    let r = evaluate(&perfect, &truths, 2).unwrap();
    assert_eq!((r.ap50, r.map), (1.0, 1.0));
    let silent = vec![Vec::new(); truths.len()];
    let r = evaluate(&silent, &truths, 2).unwrap();
    assert_eq!((r.ap50, r.map), (0.0, 0.0));
}

struct Truthful;

impl Predictor for Truthful {
    fn predict(&self, images: &Tensor) -> Result<Vec<Vec<Detection>>> {
        // one box per image whose left edge is encoded in the first pixel
        let n = images.shape()[0];
        let px = images.numel() / n;
        Ok((0..n)
            .map(|i| {
                let x = images.data()[i * px] * 100.0;
                vec![d(0, 0.9, b(x, 0.0, x + 10.0, 10.0)), d(0, 0.8, b(x + 1.0, 0.0, x + 11.0, 10.0))]
            })
            .collect())
    }
}

#[test]
fn evaluate_model_batches_and_suppresses() {
    let scenes: Vec<Scene> = (0..5)
        .map(|i| {
            let mut px = vec![0.0; 16 * 16];
            px[0] = i as f64 / 100.0;
            Scene {
                image: Tensor::new(vec![16, 16], px).unwrap(),
                objects: vec![lb(0, b(i as f64, 0.0, i as f64 + 10.0, 10.0))],
            }
        })
        .collect();
    let cfg = EvalConfig { batch: 2, ..EvalConfig::default() };
    let r = evaluate_model(&Truthful, &scenes, 1, &cfg).unwrap();
    assert_eq!(r.ap50, 1.0);
}

fn arb_case() -> impl Strategy<Value = (Vec<ScoredBox>, Vec<Vec<BBox>>)> {
    let boxes = |n| prop::collection::vec((0.0..40.0f64, 0.0..40.0f64, 4.0..12.0f64, 4.0..12.0f64), n);
    (
        prop::collection::vec(boxes(0..4), 1..4),
        prop::collection::vec(
            (0usize..3, 0.0..1.0f64, any::<bool>(), 0.0..40.0f64, 0.0..40.0f64, 4.0..12.0f64, 4.0..12.0f64),
            0..10,
        ),
    )
        .prop_map(|(g, ds)| {
            let gts: Vec<Vec<BBox>> =
                g.into_iter().map(|v| v.into_iter().map(|(x, y, w, h)| b(x, y, x + w, y + h)).collect()).collect();
            let n = gts.len();
            let dets = ds
                .into_iter()
                .map(|(i, s, near, x, y, w, h)| {
                    let img = i % n;
                    // about half the detections are jittered copies of a truth
                    let bbox = match (near, gts[img].is_empty()) {
                        (true, false) => {
                            let t = gts[img][(x as usize) % gts[img].len()];
                            let (dx, dy) = (w / 8.0 - 1.0, h / 8.0 - 1.0);
                            b(t.x1 + dx, t.y1 + dy, t.x2 + dx, t.y2 - dy)
                        }
                        _ => b(x, y, x + w, y + h),
                    };
                    sb(img, s, bbox)
                })
                .collect();
            (dets, gts)
        })
}

proptest! {
    #[test]
    fn ap_depends_only_on_ranking((dets, gts) in arb_case(), a in 0.1..5.0f64) {
        let shifted: Vec<ScoredBox> = dets.iter().map(|x| sb(x.image, (a * x.score).exp(), x.bbox)).collect();
        prop_assert_eq!(average_precision(&dets, &gts, 0.5).unwrap(), average_precision(&shifted, &gts, 0.5).unwrap());
    }

    #[test]
    fn duplicate_of_matched_truth_never_helps((dets, gts) in arb_case(), pick in 0usize..10, frac in 0.0..=1.0f64) {
        // the copy ranks after the original and overlaps no other truth of its image
        let flags = greedy_match(&dets, &gts, 0.5);
        let order = rank(&dets);
        let matched: Vec<usize> = order.iter().zip(&flags).filter(|(_, f)| **f).map(|(i, _)| *i).collect();
        prop_assume!(!matched.is_empty());
        let src = dets[matched[pick % matched.len()]];
        let overlaps = gts[src.image].iter().filter(|g| iou(&src.bbox, g) >= 0.5).count();
        prop_assume!(overlaps == 1);
        let mut more = dets.clone();
        more.push(sb(src.image, src.score * frac, src.bbox));
        prop_assert!(average_precision(&more, &gts, 0.5).unwrap() <= average_precision(&dets, &gts, 0.5).unwrap());
    }

    #[test]
    fn matches_oracle_on_random_cases((dets, gts) in arb_case(), t in 0usize..10) {
        let got = average_precision(&dets, &gts, IOU_GRID[t]).unwrap();
        prop_assert!((got - oracle_ap(&dets, &gts, IOU_GRID[t])).abs() <= 1e-12);
    }

    #[test]
    fn iou_symmetric_and_bounded(a in (0.0..50.0f64, 0.0..50.0f64, 0.0..20.0f64, 0.0..20.0f64), c in (0.0..50.0f64, 0.0..50.0f64, 0.0..20.0f64, 0.0..20.0f64)) {
        let p = b(a.0, a.1, a.0 + a.2, a.1 + a.3);
        let q = b(c.0, c.1, c.0 + c.2, c.1 + c.3);
        let v = iou(&p, &q);
        prop_assert_eq!(v, iou(&q, &p));
        prop_assert!((0.0..=1.0).contains(&v));
    }
}
