//! Independent reference implementations that the library is checked against.

use lsm_yolo::boxes::{BBox, Detection, Targets};
use lsm_yolo::eval::AreaRange;
use rand::Rng;

use super::{random_box, rng};

/// SIoU written straight from its definition with explicit trigonometry.
pub fn siou_reference(p: &BBox, t: &BBox, theta: f64) -> f64 {
    let inter = (p.x2.min(t.x2) - p.x1.max(t.x1)).max(0.0) * (p.y2.min(t.y2) - p.y1.max(t.y1)).max(0.0);
    let union = (p.x2 - p.x1) * (p.y2 - p.y1) + (t.x2 - t.x1) * (t.y2 - t.y1) - inter;
    let iou = inter / union;
    let (pcx, pcy) = ((p.x1 + p.x2) / 2.0, (p.y1 + p.y2) / 2.0);
    let (tcx, tcy) = ((t.x1 + t.x2) / 2.0, (t.y1 + t.y2) / 2.0);
    let sigma = ((tcx - pcx).powi(2) + (tcy - pcy).powi(2)).sqrt();
    let lambda = if sigma == 0.0 {
        0.0
    } else {
        let alpha = ((tcy - pcy).abs() / sigma).asin();
        1.0 - 2.0 * (alpha - std::f64::consts::FRAC_PI_4).sin().powi(2)
    };
    let cw = p.x2.max(t.x2) - p.x1.min(t.x1);
    let ch = p.y2.max(t.y2) - p.y1.min(t.y1);
    let gamma = 2.0 - lambda;
    let rho_x = ((tcx - pcx) / cw).powi(2);
    let rho_y = ((tcy - pcy) / ch).powi(2);
    let delta = (1.0 - (-gamma * rho_x).exp()) + (1.0 - (-gamma * rho_y).exp());
    let (pw, ph, tw, th) = (p.x2 - p.x1, p.y2 - p.y1, t.x2 - t.x1, t.y2 - t.y1);
    let ow = (pw - tw).abs() / pw.max(tw);
    let oh = (ph - th).abs() / ph.max(th);
    let omega = (1.0 - (-ow).exp()).powf(theta) + (1.0 - (-oh).exp()).powf(theta);
    1.0 - iou + (delta + omega) / 2.0
}

/// DFL from explicit softmax probabilities on the two bracketing bins.
pub fn dfl_reference(logits: &[f64], target: f64) -> f64 {
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let p = |i: usize| logits[i].exp() / z;
    let l = target.floor() as usize;
    let mut loss = -((l + 1) as f64 - target) * p(l).ln();
    if l + 1 < logits.len() {
        loss -= (target - l as f64) * p(l + 1).ln();
    }
    loss
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let i = iw * ih;
    i / ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - i)
}

pub fn in_range(area: f64, r: AreaRange) -> bool {
    area >= r.min && area <= r.max
}

/// Reference AP for one class at one threshold: detections in score order
/// claim the best free in-range ground truth, falling back to a free
/// out-of-range one (which makes the detection ignored). Interpolation takes,
/// for every recall level, the best precision at any recall at least as high.
pub fn reference_ap(dets: &[Vec<Detection>], gts: &[Targets], class: usize, thr: f64, area: AreaRange) -> Option<f64> {
    let thr = thr.min(1.0 - 1e-10);
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut positives = 0;
    for (d, g) in dets.iter().zip(gts) {
        let boxes: Vec<BBox> = g.boxes.iter().zip(&g.classes).filter(|(_, c)| **c == class).map(|(b, _)| *b).collect();
        let ignored: Vec<bool> = boxes.iter().map(|b| !in_range(b.area(), area)).collect();
        positives += ignored.iter().filter(|i| !**i).count();
        let mut ds: Vec<Detection> = d.iter().copied().filter(|x| x.class_id == class).collect();
        ds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut taken = vec![false; boxes.len()];
        for det in ds.iter().take(100) {
            let best = |want_ignored: bool| {
                (0..boxes.len())
                    .filter(|&j| !taken[j] && ignored[j] == want_ignored)
                    .map(|j| (j, iou(&det.bbox, &boxes[j])))
                    .filter(|(_, v)| *v >= thr)
                    .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                        Some((_, bv)) if bv > v => acc,
                        _ => Some((j, v)),
                    })
            };
            match best(false).or_else(|| best(true)) {
                Some((j, _)) => {
                    taken[j] = true;
                    if !ignored[j] {
                        scored.push((det.score, true));
                    }
                }
                None => {
                    if in_range(det.bbox.area(), area) {
                        scored.push((det.score, false));
                    }
                }
            }
        }
    }
    if positives == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut points = Vec::new();
    let mut tp = 0.0;
    for (i, (_, hit)) in scored.iter().enumerate() {
        if *hit {
            tp += 1.0;
        }
        points.push((tp / positives as f64, tp / (i + 1) as f64));
    }
    let mut sum = 0.0;
    for k in 0..101 {
        let r = k as f64 / 100.0;
        sum += points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
    }
    Some(sum / 101.0)
}

pub fn mean(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Ground truth plus jittered, duplicated and spurious detections.
pub fn synthetic_set(seed: u64, classes: usize) -> (Vec<Vec<Detection>>, Vec<Targets>) {
    let mut r = rng(seed);
    let images = r.random_range(1..6);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let n = r.random_range(0..8);
        let mut t = Targets::default();
        let mut d = Vec::new();
        for _ in 0..n {
            let b = random_box(&mut r, 200.0, 4.0, 120.0);
            let c = r.random_range(0..classes);
            t.boxes.push(b);
            t.classes.push(c);
            for _ in 0..r.random_range(0..3) {
                let j = |r: &mut rand_chacha::ChaCha8Rng| r.random_range(-0.15..0.15) * b.width().min(b.height());
                let jb = BBox::new(b.x1 + j(&mut r), b.y1 + j(&mut r), b.x2 + j(&mut r), b.y2 + j(&mut r));
                if jb.is_valid() {
                    let cls = if r.random_bool(0.9) { c } else { r.random_range(0..classes) };
                    d.push(Detection { bbox: jb, score: r.random_range(0.0..1.0), class_id: cls });
                }
            }
        }
        for _ in 0..r.random_range(0..4) {
            d.push(Detection {
                bbox: random_box(&mut r, 200.0, 4.0, 120.0),
                score: r.random_range(0.0..1.0),
                class_id: r.random_range(0..classes),
            });
        }
        dets.push(d);
        gts.push(t);
    }
    (dets, gts)
}
