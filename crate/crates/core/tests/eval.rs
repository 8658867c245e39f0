mod common;

use common::oracle::{mean, reference_ap, synthetic_set};
use lsm_yolo::boxes::{BBox, Detection};
use lsm_yolo::eval::{class_ap, coco_iou_thresholds, compute_ap, nms, AreaRange, Metrics};
use proptest::prelude::*;

#[test]
fn ap_matches_reference_matcher_on_60_seeds() {
    let thrs = coco_iou_thresholds();
    for seed in 0..60 {
        let (dets, gts) = synthetic_set(seed, 3);
        for area in [AreaRange::ALL, AreaRange::SMALL, AreaRange::MEDIUM, AreaRange::LARGE] {
            let per_class: Vec<Option<f64>> = (0..3)
                .map(|c| {
                    let v: Vec<Option<f64>> = thrs.iter().map(|&t| reference_ap(&dets, &gts, c, t, area)).collect();
                    v[0].map(|_| v.iter().map(|x| x.unwrap()).sum::<f64>() / v.len() as f64)
                })
                .collect();
            let want = mean(&per_class);
            let got = compute_ap(&dets, &gts, 3, &thrs, area);
            match (got, want) {
                (Some(g), Some(w)) => assert!((g - w).abs() < 1e-6, "seed {seed} {area:?}: {g} vs {w}"),
                (g, w) => assert_eq!(g, w, "seed {seed} {area:?}"),
            }
        }
    }
}

#[test]
fn perfect_detections_score_exactly_one() {
    for seed in 100..120 {
        let (_, gts) = synthetic_set(seed, 3);
        let dets: Vec<Vec<Detection>> = gts
            .iter()
            .map(|t| {
                t.boxes
                    .iter()
                    .zip(&t.classes)
                    .map(|(b, c)| Detection { bbox: *b, score: 0.9, class_id: *c })
                    .collect()
            })
            .collect();
        let ap = compute_ap(&dets, &gts, 3, &coco_iou_thresholds(), AreaRange::ALL);
        if gts.iter().any(|t| !t.is_empty()) {
            assert_eq!(ap, Some(1.0));
        } else {
            assert_eq!(ap, None);
        }
    }
}

#[test]
fn adding_a_low_scoring_false_positive_never_raises_ap() {
    for seed in 200..260 {
        let (mut dets, gts) = synthetic_set(seed, 2);
        let before = class_ap(&dets, &gts, 0, &[0.5], AreaRange::ALL, 100);
        dets[0].push(Detection { bbox: BBox::new(500., 500., 520., 520.), score: -1.0, class_id: 0 });
        let after = class_ap(&dets, &gts, 0, &[0.5], AreaRange::ALL, 100);
        if let (Some(b), Some(a)) = (before, after) {
            assert!(a <= b);
        }
    }
}

#[test]
fn stricter_thresholds_never_raise_ap() {
    for seed in 300..350 {
        let (dets, gts) = synthetic_set(seed, 2);
        let aps: Vec<Option<f64>> = coco_iou_thresholds()
            .iter()
            .map(|&t| class_ap(&dets, &gts, 1, &[t], AreaRange::ALL, 100))
            .collect();
        for w in aps.windows(2) {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                assert!(b <= a + 1e-12);
            }
        }
    }
}

#[test]
fn metrics_report_has_the_documented_keys() {
    let (dets, gts) = synthetic_set(7, 2);
    let names = vec!["a".to_string(), "b".to_string()];
    let m = Metrics::compute(&dets, &gts, &names, 100);
    let v: serde_json::Value = serde_json::to_value(&m).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    keys.sort();
    assert_eq!(keys, ["ap", "ap50", "ap_l", "ap_m", "ap_s", "per_class"]);
    assert!(m.table().contains("AP50:95"));
}

fn detection() -> impl Strategy<Value = Detection> {
    (0.0..80.0f64, 0.0..80.0f64, 2.0..40.0f64, 2.0..40.0f64, 0.0..1.0f64, 0usize..2).prop_map(|(x, y, w, h, s, c)| Detection {
        bbox: BBox::from_xywh(x, y, w, h),
        score: s,
        class_id: c,
    })
}

proptest! {
    #[test]
    fn nms_is_idempotent_and_suppresses(dets in prop::collection::vec(detection(), 0..40), thr in 0.2..0.9f64) {
        let once = nms(&dets, thr, 0.1);
        prop_assert_eq!(nms(&once, thr, 0.1), once.clone());
        for (i, a) in once.iter().enumerate() {
            prop_assert!(a.score >= 0.1);
            for b in &once[i + 1..] {
                prop_assert!(a.score >= b.score);
                prop_assert!(a.class_id != b.class_id || a.bbox.iou(&b.bbox) <= thr);
            }
        }
    }
}
