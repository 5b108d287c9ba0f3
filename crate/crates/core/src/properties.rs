//! Property tests across modules.

use std::collections::{BTreeMap, BTreeSet};

use crate::annotation::{Annotation, VisibilityMask};
use crate::autodiff::Graph;
use crate::evaluation::{evaluate_mr, filter_setting, EvalSetting, MrCurve};
use crate::geometry::{decode_bbox, encode_bbox, iou, nms_indices, BBox, ScoredBox};
use crate::model::scale_roi;
use crate::nn::{grid_lstm_params, grid_lstm_refine, PartScoreMap, Roi};
use crate::{Real, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..100.0, 0.0..100.0, 0.5..60.0, 0.5..60.0).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap())
}

fn scored() -> impl Strategy<Value = ScoredBox> {
    (bbox(), 0.0..1.0).prop_map(|(bbox, score)| ScoredBox { bbox, score })
}

fn brute_force_nms(boxes: &[ScoredBox], thr: Real) -> BTreeSet<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score).then(a.cmp(&b)));
    let mut kept = BTreeSet::new();
    let mut removed = vec![false; boxes.len()];
    for &i in &order {
        if removed[i] {
            continue;
        }
        kept.insert(i);
        for &j in &order {
            if j != i && iou(&boxes[i].bbox, &boxes[j].bbox) > thr {
                removed[j] = true;
            }
        }
    }
    kept
}

fn ann(image_id: usize, bbox: BBox) -> Annotation {
    Annotation {
        image_id,
        bbox,
        occlusion_fraction: 0.0,
        visibility: VisibilityMask::from_cells(1, vec![true]).unwrap(),
    }
}

/// Ground truth on a coarse grid so no two boxes overlap, with
/// detections jittered around some of them plus a few strays.
fn scene() -> impl Strategy<Value = (Vec<Annotation>, Vec<ScoredBox>)> {
    let gt = prop::collection::btree_set(0usize..12, 1..8);
    let dets = prop::collection::vec((0usize..12, -8.0..8.0f64, -8.0..8.0f64, 0.0..1.0f64, prop::bool::ANY), 0..12);
    (gt, dets).prop_map(|(cells, dets)| {
        let cell_box = |c: usize| BBox::new((c % 4) as Real * 150.0, (c / 4) as Real * 150.0, 40.0, 100.0).unwrap();
        let anns = cells.iter().map(|&c| ann(0, cell_box(c))).collect();
        let dets = dets
            .into_iter()
            .map(|(c, dx, dy, score, stray)| {
                let b = cell_box(c);
                let (x, y): (Real, Real) = if stray { (b.x_min + 60.0 + dx, b.y_min + dy) } else { (b.x_min + dx, b.y_min + dy) };
                ScoredBox {
                    bbox: BBox::new(x.max(0.0), y.max(0.0), 40.0, 100.0).unwrap(),
                    score,
                }
            })
            .collect();
        (anns, dets)
    })
}

fn curve(anns: &[Annotation], dets: &[ScoredBox], setting: &EvalSetting) -> MrCurve {
    let images = BTreeSet::from([0]);
    let d = BTreeMap::from([(0, dets.to_vec())]);
    let a = BTreeMap::from([(0, anns.to_vec())]);
    evaluate_mr(&images, &d, &a, setting).unwrap()
}

fn random_tensor(seed: u64, shape: &[usize]) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn nms_matches_brute_force(boxes in prop::collection::vec(scored(), 0..64), thr in 0.1..0.9) {
        let fast: BTreeSet<usize> = nms_indices(&boxes, thr).into_iter().collect();
        prop_assert_eq!(fast, brute_force_nms(&boxes, thr));
    }

    #[test]
    fn box_codec_round_trips(gt in bbox(), reference in bbox()) {
        let back = decode_bbox(&encode_bbox(&gt, &reference), &reference).unwrap();
        for (u, v) in [(back.x_min, gt.x_min), (back.y_min, gt.y_min), (back.width, gt.width), (back.height, gt.height)] {
            prop_assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn context_regions_nest(cx in 10.0..90.0, cy in 10.0..90.0, w in 1.0..40.0, h in 1.0..40.0, s1 in 1.0..2.5, ds in 0.0..1.0) {
        let roi = Roi::new(cx, cy, w, h, 0).unwrap();
        // A huge extent means nothing is clipped.
        let a = scale_roi(&roi, s1, (1e6, 1e6)).unwrap().to_bbox();
        let b = scale_roi(&roi, s1 + ds, (1e6, 1e6)).unwrap().to_bbox();
        prop_assert!(b.x_min <= a.x_min + 1e-12 && b.y_min <= a.y_min + 1e-12);
        prop_assert!(b.x_max() >= a.x_max() - 1e-12 && b.y_max() >= a.y_max() - 1e-12);
    }

    #[test]
    fn settings_partition_ground_truth(
        boxes in prop::collection::vec((bbox(), 0.0..1.0), 0..20),
        which in 0usize..6,
    ) {
        let setting = &EvalSetting::standard()[which];
        let anns: Vec<Annotation> = boxes
            .iter()
            .map(|&(b, occ)| Annotation { occlusion_fraction: occ, ..ann(0, b) })
            .collect();
        let (evaluated, ignored) = filter_setting(&anns, setting);
        prop_assert_eq!(evaluated.len() + ignored.len(), anns.len());
        for a in &anns {
            let n = evaluated.iter().filter(|e| *e == a).count() + ignored.iter().filter(|e| *e == a).count();
            prop_assert_eq!(n, anns.iter().filter(|e| *e == a).count());
        }
    }

    #[test]
    fn adding_a_true_positive_never_raises_miss_rate((anns, dets) in scene(), score in 0.0..1.0) {
        let setting = EvalSetting::reasonable();
        let before = curve(&anns, &dets, &setting);
        // A perfect box on ground truth no detection currently reaches.
        let free = anns.iter().find(|a| dets.iter().all(|d| iou(&d.bbox, &a.bbox) < 0.5));
        prop_assume!(free.is_some());
        let mut more = dets.clone();
        more.push(ScoredBox { bbox: free.unwrap().bbox, score });
        let after = curve(&anns, &more, &setting);
        for (b, a) in before.miss_rates.iter().zip(&after.miss_rates) {
            prop_assert!(a <= b, "{:?} -> {:?}", before.miss_rates, after.miss_rates);
        }
    }

    #[test]
    fn adding_a_false_positive_never_lowers_miss_rate((anns, dets) in scene(), score in 0.0..1.0) {
        let setting = EvalSetting::reasonable();
        let before = curve(&anns, &dets, &setting);
        let mut more = dets.clone();
        // Far from every ground-truth cell.
        more.push(ScoredBox { bbox: BBox::new(2000.0, 2000.0, 40.0, 100.0).unwrap(), score });
        let after = curve(&anns, &more, &setting);
        for (b, a) in before.miss_rates.iter().zip(&after.miss_rates) {
            prop_assert!(a >= b, "{:?} -> {:?}", before.miss_rates, after.miss_rates);
        }
    }

    #[test]
    fn stricter_overlap_never_lowers_log_average((anns, dets) in scene()) {
        let loose = EvalSetting::new("loose", 50.0, (0.0, 1.0), 0.5).unwrap();
        let strict = EvalSetting::new("strict", 50.0, (0.0, 1.0), 0.75).unwrap();
        prop_assert!(curve(&anns, &dets, &strict).log_average >= curve(&anns, &dets, &loose).log_average);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn maxout_bounds_and_ignores_order(seed in any::<u64>(), n in 2usize..5) {
        let mut g = Graph::new();
        let maps: Vec<_> = (0..n).map(|i| g.input(random_tensor(seed.wrapping_add(i as u64), &[2, 3, 3]))).collect();
        let merged = g.maxout_merge(&maps).unwrap();
        let mut reversed = maps.clone();
        reversed.reverse();
        let merged_rev = g.maxout_merge(&reversed).unwrap();
        prop_assert_eq!(g.value(merged).data(), g.value(merged_rev).data());
        for &m in &maps {
            for (o, x) in g.value(merged).data().iter().zip(g.value(m).data()) {
                prop_assert!(o >= x);
            }
        }
    }

    #[test]
    fn shape_ops_invert_exactly(seed in any::<u64>(), axis in 0usize..3) {
        let x = random_tensor(seed, &[2, 3, 4]);
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let p = g.permute(v, &[2, 0, 1]).unwrap();
        let p = g.permute(p, &[1, 2, 0]).unwrap();
        prop_assert_eq!(g.value(p), &x);
        let f = g.flip(v, axis).unwrap();
        let f = g.flip(f, axis).unwrap();
        prop_assert_eq!(g.value(f), &x);
        let r = g.reshape(v, &[6, 4]).unwrap();
        let r = g.reshape(r, &[2, 3, 4]).unwrap();
        prop_assert_eq!(g.value(r), &x);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..8) {
        let mut g = Graph::new();
        let x = g.input(random_tensor(seed, &[rows, cols]));
        let p = g.softmax(x);
        for row in g.value(p).data().chunks(cols) {
            prop_assert!((row.iter().sum::<Real>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn grid_lstm_keeps_cells_on_the_simplex(seed in any::<u64>(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, grid) = grid_lstm_params(2, 4, &mut rng);
        let logits = random_tensor(seed ^ 1, &[k * k, 2]);
        let probs: Vec<Real> = logits.data().chunks(2).flat_map(crate::autodiff::softmax_slice).collect();
        let map = PartScoreMap::new(Tensor::new(vec![k, k, 2], probs).unwrap()).unwrap();
        let out = grid_lstm_refine(&map, &params, &grid).unwrap();
        prop_assert!(out.simplex_error() <= 1e-12);
    }
}
