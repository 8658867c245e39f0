//! Non-maximum suppression and COCO-protocol average precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, Detection, Targets};
use crate::data::{GroundTruthSet, LetterboxTransform, Loader, AugmentPolicy};
use crate::error::Result;
use crate::head::decode_boxes;
use crate::network::Model;
use crate::nn::Ctx;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_thr: f64,
    pub iou_thr: f64,
    pub max_dets: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_thr: 0.001,
            iou_thr: 0.7,
            max_dets: 100,
            batch_size: 8,
        }
    }
}

/// Per-class greedy suppression. Detections scoring below `score_thr` are
/// dropped; survivors are returned by descending score (ties keep input
/// order). A box is suppressed when its IoU with a kept box of the same
/// class exceeds `iou_thr`.
pub fn nms(dets: &[Detection], iou_thr: f64, score_thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= score_thr).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) > iou_thr)
        {
            continue;
        }
        kept.push(d);
    }
    kept
}

/// Object-area bucket in squared pixels, `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRange {
    pub min: f64,
    pub max: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange { min: 0.0, max: 1e10 };
    pub const SMALL: AreaRange = AreaRange { min: 0.0, max: 32.0 * 32.0 };
    pub const MEDIUM: AreaRange = AreaRange { min: 32.0 * 32.0, max: 96.0 * 96.0 };
    pub const LARGE: AreaRange = AreaRange { min: 96.0 * 96.0, max: 1e10 };

    fn contains(&self, area: f64) -> bool {
        area >= self.min && area <= self.max
    }
}

pub const RECALL_POINTS: usize = 101;

/// 0.50, 0.55, …, 0.95
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Copy)]
struct Scored {
    score: f64,
    tp: bool,
    ignore: bool,
}

/// Greedy matching for one image and class at one threshold.
fn match_image(
    dets: &[Detection],
    gts: &[BBox],
    iou_thr: f64,
    area: AreaRange,
    max_dets: usize,
) -> (Vec<Scored>, usize) {
    let mut gt_order: Vec<usize> = (0..gts.len()).collect();
    let gt_ignore: Vec<bool> = gts.iter().map(|g| !area.contains(g.area())).collect();
    gt_order.sort_by_key(|&g| gt_ignore[g]);
    let mut det_order: Vec<usize> = (0..dets.len()).collect();
    det_order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    det_order.truncate(max_dets);
    let mut gt_taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(det_order.len());
    for &d in &det_order {
        let mut best = iou_thr.min(1.0 - 1e-10);
        let mut m: Option<usize> = None;
        for &g in &gt_order {
            if gt_taken[g] {
                continue;
            }
            if let Some(mg) = m {
                if !gt_ignore[mg] && gt_ignore[g] {
                    break;
                }
            }
            let iou = dets[d].bbox.iou(&gts[g]);
            if iou < best {
                continue;
            }
            best = iou;
            m = Some(g);
        }
        let (tp, ignore) = match m {
            Some(g) => {
                gt_taken[g] = true;
                (true, gt_ignore[g])
            }
            None => (false, !area.contains(dets[d].bbox.area())),
        };
        out.push(Scored {
            score: dets[d].score,
            tp,
            ignore,
        });
    }
    let positives = gt_ignore.iter().filter(|i| !**i).count();
    (out, positives)
}

/// 101-point interpolated precision from score-sorted match flags.
fn interpolated_ap(matches: &mut [Scored], positives: usize) -> f64 {
    matches.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for m in matches.iter().filter(|m| !m.ignore) {
        if m.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&v| v < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// AP of one class averaged over `iou_thresholds`; `None` when the class
/// has no ground truth inside `area`.
pub fn class_ap(
    dets: &[Vec<Detection>],
    gts: &[Targets],
    class: usize,
    iou_thresholds: &[f64],
    area: AreaRange,
    max_dets: usize,
) -> Option<f64> {
    let per_image: Vec<(Vec<Detection>, Vec<BBox>)> = dets
        .iter()
        .zip(gts)
        .map(|(d, g)| {
            let d: Vec<Detection> = d.iter().copied().filter(|d| d.class_id == class).collect();
            let g: Vec<BBox> = g
                .boxes
                .iter()
                .zip(&g.classes)
                .filter(|(_, &c)| c == class)
                .map(|(b, _)| *b)
                .collect();
            (d, g)
        })
        .collect();
    let mut total = 0.0;
    for &thr in iou_thresholds {
        let mut all = Vec::new();
        let mut positives = 0;
        for (d, g) in &per_image {
            let (m, p) = match_image(d, g, thr, area, max_dets);
            all.extend(m);
            positives += p;
        }
        if positives == 0 {
            return None;
        }
        total += interpolated_ap(&mut all, positives);
    }
    Some(total / iou_thresholds.len() as f64)
}

/// Mean AP over classes that have ground truth in `area`; `None` when no
/// class does.
pub fn compute_ap(
    dets: &[Vec<Detection>],
    gts: &[Targets],
    num_classes: usize,
    iou_thresholds: &[f64],
    area: AreaRange,
) -> Option<f64> {
    mean_defined((0..num_classes).map(|c| class_ap(dets, gts, c, iou_thresholds, area, 100)))
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// COCO-style summary; `null` entries mean no ground truth in that bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub per_class: BTreeMap<String, Option<f64>>,
}

impl Metrics {
    pub fn compute(dets: &[Vec<Detection>], gts: &[Targets], class_names: &[String], max_dets: usize) -> Self {
        let coco = coco_iou_thresholds();
        let nc = class_names.len();
        let per = |thr: &[f64], area: AreaRange| -> Vec<Option<f64>> {
            (0..nc).map(|c| class_ap(dets, gts, c, thr, area, max_dets)).collect()
        };
        let all = per(&coco, AreaRange::ALL);
        Self {
            ap: mean_defined(all.iter().copied()),
            ap50: mean_defined(per(&[0.5], AreaRange::ALL).into_iter()),
            ap_s: mean_defined(per(&coco, AreaRange::SMALL).into_iter()),
            ap_m: mean_defined(per(&coco, AreaRange::MEDIUM).into_iter()),
            ap_l: mean_defined(per(&coco, AreaRange::LARGE).into_iter()),
            per_class: class_names.iter().cloned().zip(all).collect(),
        }
    }

    pub fn table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut s = format!(
            "{:<12} {:>8}\n{:<12} {:>8}\n{:<12} {:>8}\n{:<12} {:>8}\n{:<12} {:>8}\n{:<12} {:>8}\n",
            "metric", "value", "AP50:95", f(self.ap), "AP50", f(self.ap50), "AP_S", f(self.ap_s), "AP_M", f(self.ap_m), "AP_L", f(self.ap_l)
        );
        for (name, v) in &self.per_class {
            s.push_str(&format!("{:<12} {:>8}\n", format!("AP[{name}]"), f(*v)));
        }
        s
    }
}

/// Runs the model on letterboxed images and returns NMS-filtered
/// detections mapped back through each transform and clipped to the
/// original `(width, height)`.
pub fn predict(
    model: &Model,
    images: &candle_core::Tensor,
    transforms: &[LetterboxTransform],
    sizes: &[(usize, usize)],
    cfg: &EvalConfig,
) -> Result<Vec<Vec<Detection>>> {
    let raw = model.forward(images, &Ctx::eval())?;
    let size = model.config().input_size as f64;
    let per_image = decode_boxes(&raw, cfg.score_thr, size)?;
    Ok(per_image
        .into_iter()
        .zip(transforms)
        .zip(sizes)
        .map(|((dets, tf), &(w, h))| {
            let mut kept = nms(&dets, cfg.iou_thr, cfg.score_thr);
            kept.truncate(cfg.max_dets);
            kept.into_iter()
                .filter_map(|d| {
                    let bbox = tf.invert(&d.bbox).clip(w as f64, h as f64);
                    bbox.is_valid().then_some(Detection { bbox, ..d })
                })
                .collect()
        })
        .collect())
}

/// Detections for every image of `set`, in set order.
pub fn detect_set(model: &Model, set: &GroundTruthSet, cfg: &EvalConfig) -> Result<Vec<Vec<Detection>>> {
    let loader = Loader::new(set, model.config().input_size, cfg.batch_size, AugmentPolicy::identity(), 0)?;
    detect_loader(model, set, &loader, cfg)
}

pub fn detect_loader(model: &Model, set: &GroundTruthSet, loader: &Loader, cfg: &EvalConfig) -> Result<Vec<Vec<Detection>>> {
    let mut out = vec![Vec::new(); set.len()];
    for batch in loader.epoch(0, false)? {
        let sizes: Vec<(usize, usize)> = batch
            .indices
            .iter()
            .map(|&i| (set.images[i].width, set.images[i].height))
            .collect();
        let dets = predict(model, &batch.images, &batch.transforms, &sizes, cfg)?;
        for (i, d) in batch.indices.iter().zip(dets) {
            out[*i] = d;
        }
    }
    Ok(out)
}

/// Full metrics of `model` on `set`, in original image coordinates.
pub fn evaluate_model(model: &Model, set: &GroundTruthSet, cfg: &EvalConfig) -> Result<Metrics> {
    let dets = detect_set(model, set, cfg)?;
    let gts: Vec<Targets> = set.images.iter().map(|r| r.targets()).collect();
    Ok(Metrics::compute(&dets, &gts, &set.class_names, cfg.max_dets))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, score: f64, class_id: usize) -> Detection {
        Detection {
            bbox: BBox::new(x, 0., x + 10., 10.),
            score,
            class_id,
        }
    }

    #[test]
    fn nms_keeps_best_of_identical() {
        let kept = nms(&[det(0., 0.8, 0), det(0., 0.9, 0)], 0.7, 0.001);
        assert_eq!(kept, vec![det(0., 0.9, 0)]);
    }

    #[test]
    fn nms_disjoint_and_per_class() {
        assert_eq!(nms(&[det(0., 0.5, 0), det(50., 0.6, 0)], 0.7, 0.0).len(), 2);
        assert_eq!(nms(&[det(0., 0.5, 0), det(0., 0.6, 1)], 0.7, 0.0).len(), 2);
    }

    #[test]
    fn nms_drops_low_scores() {
        assert!(nms(&[det(0., 0.0005, 0)], 0.7, 0.001).is_empty());
    }

    #[test]
    fn single_perfect_detection() {
        let gt = Targets {
            boxes: vec![BBox::new(0., 0., 10., 10.)],
            classes: vec![0],
        };
        let d = vec![vec![det(0., 0.9, 0)]];
        for thr in coco_iou_thresholds() {
            assert_eq!(compute_ap(&d, std::slice::from_ref(&gt), 1, &[thr], AreaRange::ALL), Some(1.0));
        }
        assert_eq!(compute_ap(&[vec![]], &[gt], 1, &[0.5], AreaRange::ALL), Some(0.0));
    }
}
