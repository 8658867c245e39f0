mod common;

use candle_core::{DType, Device, Tensor};
use common::oracle::{dfl_reference, siou_reference};
use common::{flat, random_box, random_targets, rng, tiny_model, uniform};
use lsm_yolo::boxes::{BBox, Targets};
use lsm_yolo::head::Anchors;
use lsm_yolo::loss::{
    assign_image, dfl_loss, dfl_loss_tensor, siou_loss, siou_loss_tensor, total_loss, AssignerConfig, LossConfig,
};
use lsm_yolo::nn::Ctx;
use proptest::prelude::*;
use rand::Rng;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..100.0f64, 0.0..100.0f64, 1.0..60.0f64, 1.0..60.0f64).prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn siou_matches_reference(p in bbox(), t in bbox()) {
        let got = siou_loss(&p, &t, 4.0).unwrap();
        let want = siou_reference(&p, &t, 4.0);
        prop_assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn siou_is_translation_invariant(p in bbox(), t in bbox(), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
        let a = siou_loss(&p, &t, 4.0).unwrap();
        let b = siou_loss(&p.translate(dx, dy), &t.translate(dx, dy), 4.0).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn siou_grows_with_distance(t in bbox(), ux in -1.0..1.0f64, uy in -1.0..1.0f64, d in 1.0..20.0f64) {
        prop_assume!(ux.hypot(uy) > 0.1);
        let n = ux.hypot(uy);
        let (ux, uy) = (ux / n, uy / n);
        let near = siou_loss(&t.translate(ux * d, uy * d), &t, 4.0).unwrap();
        let far = siou_loss(&t.translate(ux * (d + 5.0), uy * (d + 5.0)), &t, 4.0).unwrap();
        prop_assert!(far > near, "{far} <= {near}");
    }
}

#[test]
fn siou_of_identical_boxes_is_zero() {
    let mut r = rng(1);
    for _ in 0..100 {
        let b = random_box(&mut r, 200.0, 1.0, 80.0);
        assert!(siou_loss(&b, &b, 4.0).unwrap() < 1e-6);
    }
    let zero = BBox::new(1.0, 1.0, 1.0, 5.0);
    assert_eq!(siou_loss(&zero, &BBox::new(0., 0., 2., 2.), 4.0).unwrap_err().kind(), "degenerate-box");
}

#[test]
fn siou_tensor_agrees_with_scalar() {
    let mut r = rng(2);
    let pairs: Vec<(BBox, BBox)> = (0..200)
        .map(|_| (random_box(&mut r, 100.0, 2.0, 50.0), random_box(&mut r, 100.0, 2.0, 50.0)))
        .collect();
    let rows = |f: fn(&(BBox, BBox)) -> BBox| {
        let v: Vec<f64> = pairs.iter().flat_map(|p| f(p).to_array()).collect();
        Tensor::from_vec(v, (pairs.len(), 4), &Device::Cpu).unwrap()
    };
    let got = flat(&siou_loss_tensor(&rows(|p| p.0), &rows(|p| p.1), 4.0).unwrap());
    for (g, (p, t)) in got.iter().zip(&pairs) {
        assert!((g - siou_loss(p, t, 4.0).unwrap()).abs() < 1e-5);
    }
}

#[test]
fn dfl_matches_brute_force_on_1000_cases() {
    let mut r = rng(3);
    let mut worst = 0f64;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..1000 {
        let logits: Vec<f64> = (0..16).map(|_| r.random_range(-3.0..3.0)).collect();
        let t = if r.random_bool(0.05) { r.random_range(0..16) as f64 } else { r.random_range(0.0..15.0) };
        worst = worst.max((dfl_loss(&logits, t).unwrap() - dfl_reference(&logits, t)).abs());
        rows.extend_from_slice(&logits);
        targets.push(t);
    }
    assert!(worst < 1e-6, "{worst}");
    let tensor = Tensor::from_vec(rows.clone(), (1000, 16), &Device::Cpu).unwrap();
    let got = flat(&dfl_loss_tensor(&tensor, &targets).unwrap());
    for (i, g) in got.iter().enumerate() {
        assert!((g - dfl_reference(&rows[i * 16..(i + 1) * 16], targets[i])).abs() < 1e-6);
    }
    assert_eq!(dfl_loss(&[0.0; 16], 15.5).unwrap_err().kind(), "out-of-range");
}

#[test]
fn total_is_the_weighted_sum_and_linear_in_eta() {
    let model = tiny_model(4, DType::F64);
    let x = uniform(&[2, 3, 64, 64], 0.0, 1.0, 5);
    let raw = model.forward(&x, &Ctx::eval()).unwrap();
    let mut r = rng(6);
    let gts = vec![random_targets(&mut r, 3, 64.0, 3), random_targets(&mut r, 2, 64.0, 3)];
    let cfg = LossConfig::default();
    let v = total_loss(&raw, &gts, &cfg).unwrap().values().unwrap();
    assert_eq!(v.total, 0.5 * v.bce + 1.5 * v.dfl + 7.5 * v.siou);
    assert!(v.bce >= 0.0 && v.dfl >= 0.0 && v.siou >= 0.0);
    let doubled = LossConfig { eta: 15.0, ..cfg };
    let w = total_loss(&raw, &gts, &doubled).unwrap().values().unwrap();
    assert!(((w.total - v.total) - 7.5 * v.siou).abs() < 1e-12 * w.total.abs().max(1.0));
}

#[test]
fn images_without_objects_only_pay_classification() {
    let model = tiny_model(7, DType::F64);
    let raw = model.forward(&uniform(&[1, 3, 64, 64], 0.0, 1.0, 8), &Ctx::eval()).unwrap();
    let out = total_loss(&raw, &[Targets::default()], &LossConfig::default()).unwrap();
    let v = out.values().unwrap();
    assert_eq!(out.positives, 0);
    assert_eq!((v.dfl, v.siou), (0.0, 0.0));
    assert!(v.bce > 0.0);
    assert_eq!(v.total, 0.5 * v.bce);
}

fn grid_anchors() -> Anchors {
    Anchors::for_grids(&[(4, 16, 16), (8, 8, 8)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn assignment_respects_its_invariants(seed in any::<u64>(), n in 1usize..6, k in 1usize..12) {
        let anchors = grid_anchors();
        let mut r = rng(seed);
        let gts = random_targets(&mut r, n, 64.0, 3);
        let scores: Vec<Vec<f64>> = (0..anchors.len()).map(|_| (0..3).map(|_| r.random_range(0.01..0.99)).collect()).collect();
        let preds: Vec<[f64; 4]> = (0..anchors.len()).map(|_| random_box(&mut r, 64.0, 4.0, 30.0).to_array()).collect();
        let cfg = AssignerConfig { top_k: k, ..AssignerConfig::default() };
        let a = assign_image(&anchors, &scores, &preds, &gts, &cfg);
        let mut per_gt = vec![0usize; n];
        for (loc, m) in a.matched.iter().enumerate() {
            let s = a.score[loc];
            prop_assert!((0.0..=1.0).contains(&s));
            match m {
                Some(g) => {
                    let (cx, cy) = anchors.centers[loc];
                    let b = gts.boxes[*g];
                    prop_assert!(cx > b.x1 && cx < b.x2 && cy > b.y1 && cy < b.y2);
                    per_gt[*g] += 1;
                }
                None => prop_assert_eq!(s, 0.0),
            }
        }
        prop_assert!(per_gt.iter().all(|&c| c <= k));
    }

    #[test]
    fn disjoint_objects_get_their_full_quota(seed in any::<u64>(), k in 1usize..12) {
        let anchors = grid_anchors();
        let mut r = rng(seed);
        // Two boxes in separate halves of the image never compete.
        let left = BBox::from_xywh(r.random_range(0.0..8.0), r.random_range(0.0..30.0), r.random_range(8.0..22.0), r.random_range(8.0..30.0));
        let right = left.translate(32.0, 0.0);
        let gts = Targets { boxes: vec![left, right], classes: vec![0, 1] };
        let scores = vec![vec![0.5; 3]; anchors.len()];
        let preds: Vec<[f64; 4]> = (0..anchors.len()).map(|_| random_box(&mut r, 64.0, 4.0, 30.0).to_array()).collect();
        let cfg = AssignerConfig { top_k: k, ..AssignerConfig::default() };
        let a = assign_image(&anchors, &scores, &preds, &gts, &cfg);
        for (g, b) in gts.boxes.iter().enumerate() {
            let candidates = anchors.centers.iter().filter(|(x, y)| *x > b.x1 && *x < b.x2 && *y > b.y1 && *y < b.y2).count();
            let got = a.matched.iter().filter(|m| **m == Some(g)).count();
            prop_assert_eq!(got, candidates.min(k));
        }
    }
}
