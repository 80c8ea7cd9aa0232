// SPDX-License-Identifier: MIT OR Apache-2.0

use approx::assert_abs_diff_eq;
use ndarray::{array, Array2};
use proptest::prelude::*;
use spatial_cbm::eval::*;
use spatial_cbm::Error;

fn sample(id: &str, heatmap: Array2<f64>, gt: Array2<u8>) -> SegSample {
    SegSample { image_id: id.into(), heatmap, gt }
}

/// Mean precision at the rank of each positive; valid for distinct scores.
fn ap_by_rank(scores: &[f64], labels: &[u8]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut hits = 0.0;
    let mut total = 0.0;
    for (rank, &i) in idx.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1.0;
            total += hits / (rank + 1) as f64;
        }
    }
    total / pos
}

#[test]
fn hand_worked_four_by_four() {
    // mean = 0.375, so the six 1.0 cells and the 0.5 cell are foreground.
    let heat = array![
        [1.0, 1.0, 1.0, 0.0],
        [1.0, 1.0, 1.0, 0.0],
        [0.5, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0],
    ];
    let gt = array![[1u8, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 1]];
    let r = seg_metrics(&[sample("a", heat, gt)], ThresholdPolicy::MeanThreshold, MiouAggregation::Dataset).unwrap();
    assert_eq!(r.confusion, Confusion { tp: 3, fp: 4, fn_: 1, tn: 8 });
    assert_abs_diff_eq!(r.pixel_accuracy, 11.0 / 16.0, epsilon = 1e-12);
    assert_abs_diff_eq!(r.fg_iou, 3.0 / 8.0, epsilon = 1e-12);
    assert_abs_diff_eq!(r.bg_iou, 8.0 / 13.0, epsilon = 1e-12);
    assert_abs_diff_eq!(r.miou, 0.5 * (3.0 / 8.0 + 8.0 / 13.0), epsilon = 1e-12);
    // Scores 1.0 (x6, 3 positives), 0.5 (x1, 0), 0.0 (x9, 1):
    // AP = 3/4 * 3/6 + 1/4 * 4/16.
    assert_abs_diff_eq!(r.map, 0.75 * 0.5 + 0.25 * 0.25, epsilon = 1e-12);
}

#[test]
fn six_gt_four_predicted_three_overlap() {
    let gt = array![[1u8, 1, 1, 0], [1, 1, 1, 0], [0, 0, 0, 0], [0, 0, 0, 0]];
    let heat = array![[0.9, 0.8, 0.7, 0.6], [0.1, 0.1, 0.1, 0.1], [0.1, 0.1, 0.1, 0.1], [0.1, 0.1, 0.1, 0.1]];
    let r = seg_metrics(&[sample("hand", heat, gt)], ThresholdPolicy::Fixed { t: 0.5 }, MiouAggregation::Dataset).unwrap();
    assert_eq!(r.confusion, Confusion { tp: 3, fp: 1, fn_: 3, tn: 9 });
    assert_eq!(r.fg_iou, 3.0 / 7.0);
    assert_eq!(r.pixel_accuracy, 12.0 / 16.0);
    assert_eq!(r.bg_iou, 9.0 / 13.0);
    let c = r.confusion;
    assert_eq!(r.fg_iou, c.tp as f64 / (c.tp + c.fp + c.fn_) as f64);
}

#[test]
fn binarize_matches_loop() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let h = Array2::from_shape_fn((4, 4), |_| rng.random_range(-2.0..2.0));
    let mean = h.iter().sum::<f64>() / 16.0;
    let got = binarize(h.view(), ThresholdPolicy::MeanThreshold);
    for ((i, j), &v) in h.indexed_iter() {
        assert_eq!(got[[i, j]], (v >= mean) as u8);
    }
    let flat = Array2::from_elem((3, 3), 0.3);
    assert!(binarize(flat.view(), ThresholdPolicy::MeanThreshold).iter().all(|&v| v == 1));
    let cells = array![[0.0, 1.0], [1.0, 0.0]];
    assert_eq!(binarize(cells.view(), ThresholdPolicy::Fixed { t: 0.5 }), array![[0u8, 1], [1, 0]]);
}

#[test]
fn perfect_and_inverted() {
    let gt = array![[0u8, 1, 1], [0, 1, 0], [0, 0, 0]];
    let good = gt.mapv(|v| v as f64);
    let r = seg_metrics(&[sample("p", good.clone(), gt.clone())], ThresholdPolicy::MeanThreshold, MiouAggregation::Dataset)
        .unwrap();
    assert_eq!((r.pixel_accuracy, r.miou, r.map), (1.0, 1.0, 1.0));

    let bad = good.mapv(|v| 1.0 - v);
    let r = seg_metrics(&[sample("i", bad, gt)], ThresholdPolicy::MeanThreshold, MiouAggregation::Dataset).unwrap();
    assert_eq!(r.pixel_accuracy, 0.0);
    assert_eq!(r.miou, 0.0);
    // The three positives tie at the lowest score, one block of 9: AP = 3/9.
    assert_abs_diff_eq!(r.map, 1.0 / 3.0, epsilon = 1e-12);
}

#[test]
fn empty_union_and_skipped_map() {
    let gt = Array2::<u8>::zeros((2, 2));
    let heat = Array2::<f64>::zeros((2, 2));
    let r = seg_metrics(&[sample("z", heat, gt)], ThresholdPolicy::Fixed { t: 0.5 }, MiouAggregation::PerImage).unwrap();
    assert_eq!(r.fg_iou, 1.0);
    assert_eq!(r.miou, 1.0);
    assert_eq!(r.n_map_samples, 0);
}

#[test]
fn per_image_aggregation_differs_from_dataset() {
    let a = sample("a", array![[1.0, 0.0], [0.0, 0.0]], array![[1u8, 0], [0, 0]]);
    let b = sample("b", array![[1.0, 1.0], [0.0, 0.0]], array![[0u8, 0], [0, 1]]);
    let t = ThresholdPolicy::Fixed { t: 0.5 };
    let d = seg_metrics(&[a.clone(), b.clone()], t, MiouAggregation::Dataset).unwrap();
    let p = seg_metrics(&[a, b], t, MiouAggregation::PerImage).unwrap();
    // Dataset: tp 1, fp 2, fn 1, tn 4. Per image: a = 1.0, b = (0 + 1/4)/2.
    assert_abs_diff_eq!(d.miou, 0.5 * (1.0 / 4.0 + 4.0 / 7.0), epsilon = 1e-12);
    assert_abs_diff_eq!(p.miou, 0.5 * (1.0 + 0.125), epsilon = 1e-12);
}

#[test]
fn input_errors() {
    let r = seg_metrics(&[], ThresholdPolicy::MeanThreshold, MiouAggregation::Dataset);
    assert!(matches!(r, Err(Error::InvalidInput(_))));
    let bad = sample("odd-one", Array2::zeros((2, 3)), Array2::zeros((3, 2)));
    match seg_metrics(&[bad], ThresholdPolicy::MeanThreshold, MiouAggregation::Dataset) {
        Err(Error::Geometry(m)) => assert!(m.contains("odd-one")),
        other => panic!("{other:?}"),
    }
    let r = accuracy_report(&[0, 1], &[0, 5], &["a".into(), "b".into()], &["x".into(), "y".into()]);
    match r {
        Err(Error::Data(m)) => assert!(m.contains('b')),
        other => panic!("{other:?}"),
    }
}

#[test]
fn accuracy_table() {
    let names = vec!["cat".to_string(), "dog".to_string(), "eel".to_string()];
    let r = accuracy_report(&[0, 0, 1, 2, 1], &[0, 1, 1, 2, 2], &[], &names).unwrap();
    assert_eq!((r.correct, r.n), (3, 5));
    assert_abs_diff_eq!(r.top1, 0.6);
    let acc: Vec<f64> = r.per_class.iter().map(|c| c.accuracy).collect();
    assert_eq!(acc, vec![1.0, 0.5, 0.5]);
    assert!(r.to_table().contains("dog"));
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("val.jsonl");
    std::fs::write(&p, "{\"image\":\"a.png\",\"label\":2,\"mask\":\"m/a.png\"}\n\n{\"image\":\"b.png\",\"label\":0}\n")
        .unwrap();
    let e = load_manifest(&p).unwrap();
    assert_eq!(e.len(), 2);
    assert_eq!(e[0].image, dir.path().join("a.png"));
    assert_eq!(e[0].mask.as_deref(), Some(dir.path().join("m/a.png").as_path()));
    assert_eq!(e[1].id_or(1), "b.png");
    std::fs::write(&p, "{\"image\":1}\n").unwrap();
    assert!(matches!(load_manifest(&p), Err(Error::Data(_))));
}

proptest! {
    #[test]
    fn ap_matches_rank_form(
        (scores, labels) in (2usize..40).prop_flat_map(|n| (
            proptest::collection::hash_set(-10_000i32..10_000, n),
            proptest::collection::vec(0u8..2, n),
        ))
    ) {
        let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 100.0).collect();
        let labels = &labels[..scores.len()];
        match average_precision(&scores, labels) {
            None => prop_assert!(labels.iter().all(|&l| l == 0)),
            Some(ap) => prop_assert!((ap - ap_by_rank(&scores, labels)).abs() < 1e-12),
        }
    }

    #[test]
    fn map_is_invariant_to_monotone_maps_and_order(
        seed in any::<u64>(),
        n in 1usize..6,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<SegSample> = (0..n).map(|i| {
            let heat = Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0));
            let gt = Array2::from_shape_fn((5, 6), |_| rng.random_bool(0.3) as u8);
            sample(&format!("s{i}"), heat, gt)
        }).collect();
        let base = seg_metrics(&samples, ThresholdPolicy::MeanThreshold, MiouAggregation::Dataset).unwrap();
        let cubed: Vec<SegSample> = samples.iter().map(|s| SegSample {
            heatmap: s.heatmap.mapv(|v| v * v * v + 1.0), ..s.clone()
        }).collect();
        let c = seg_metrics(&cubed, ThresholdPolicy::MeanThreshold, MiouAggregation::Dataset).unwrap();
        prop_assert!((base.map - c.map).abs() < 1e-9);
        let mut rev = samples.clone();
        rev.reverse();
        let r = seg_metrics(&rev, ThresholdPolicy::MeanThreshold, MiouAggregation::Dataset).unwrap();
        prop_assert_eq!(base, r);
    }
}
