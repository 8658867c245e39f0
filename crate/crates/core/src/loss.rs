//! Composite detection loss: γ·BCE + ζ·DFL + η·SIoU, with task-aligned
//! target assignment.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, Targets};
use crate::error::{Error, Result};
use crate::head::{distances_to_boxes, distribution_expectation, Anchors, RawHeadOutput};
use crate::nn::{log_softmax_last, sigmoid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Classification (BCE) weight.
    pub gamma: f64,
    /// Distribution focal loss weight.
    pub zeta: f64,
    /// SIoU weight.
    pub eta: f64,
    pub assigner: AssignerConfig,
    /// Shape-cost exponent of SIoU.
    pub siou_theta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            zeta: 1.5,
            eta: 7.5,
            assigner: AssignerConfig::default(),
            siou_theta: 4.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.zeta > 0.0 && self.eta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be positive, got {}, {}, {}",
                self.gamma, self.zeta, self.eta
            )));
        }
        if self.assigner.top_k == 0 {
            return Err(Error::InvalidConfig("assigner top_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignerConfig {
    pub top_k: usize,
    /// Exponent on the classification score.
    pub alpha: f64,
    /// Exponent on the IoU.
    pub beta: f64,
}

impl Default for AssignerConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            alpha: 0.5,
            beta: 6.0,
        }
    }
}

const EPS: f64 = 1e-7;

/// SIoU loss of one box pair. Zero for identical boxes.
pub fn siou_loss(pred: &BBox, target: &BBox, theta: f64) -> Result<f64> {
    if !target.is_valid() {
        return Err(Error::DegenerateBox(format!("target {target:?} has no area")));
    }
    if !pred.is_valid() {
        return Err(Error::DegenerateBox(format!("prediction {pred:?} has no area")));
    }
    let (w1, h1) = (pred.width(), pred.height());
    let (w2, h2) = (target.width(), target.height());
    let iou = pred.iou(target);
    let cw = pred.x2.max(target.x2) - pred.x1.min(target.x1);
    let ch = pred.y2.max(target.y2) - pred.y1.min(target.y1);
    let (c1x, c1y) = pred.center();
    let (c2x, c2y) = target.center();
    let (dx, dy) = (c2x - c1x, c2y - c1y);
    let sigma = dx.hypot(dy);
    let angle = if sigma < EPS {
        0.0
    } else {
        let sin_x = dx.abs() / sigma;
        let sin_a = if sin_x > std::f64::consts::FRAC_1_SQRT_2 {
            dy.abs() / sigma
        } else {
            sin_x
        };
        // cos(2·asin(s) − π/2) = sin(2·asin(s)) = 2s√(1−s²)
        2.0 * sin_a * (1.0 - sin_a * sin_a).max(0.0).sqrt()
    };
    let g = angle - 2.0;
    let distance = 2.0 - (g * (dx / cw).powi(2)).exp() - (g * (dy / ch).powi(2)).exp();
    let ow = (w1 - w2).abs() / w1.max(w2);
    let oh = (h1 - h2).abs() / h1.max(h2);
    let shape = (1.0 - (-ow).exp()).powf(theta) + (1.0 - (-oh).exp()).powf(theta);
    Ok(1.0 - iou + 0.5 * (distance + shape))
}

/// Differentiable SIoU over rows of (n, 4) corner boxes → (n).
pub fn siou_loss_tensor(pred: &Tensor, target: &Tensor, theta: f64) -> Result<Tensor> {
    let col = |t: &Tensor, i: usize| t.narrow(1, i, 1).and_then(|c| c.squeeze(1));
    let (px1, py1, px2, py2) = (col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?);
    let (tx1, ty1, tx2, ty2) = (col(target, 0)?, col(target, 1)?, col(target, 2)?, col(target, 3)?);
    let w1 = ((&px2 - &px1)? + EPS)?;
    let h1 = ((&py2 - &py1)? + EPS)?;
    let w2 = ((&tx2 - &tx1)? + EPS)?;
    let h2 = ((&ty2 - &ty1)? + EPS)?;
    let iw = (px2.minimum(&tx2)? - px1.maximum(&tx1)?)?.relu()?;
    let ih = (py2.minimum(&ty2)? - py1.maximum(&ty1)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((((&w1 * &h1)? + (&w2 * &h2)?)? - &inter)? + EPS)?;
    let iou = (&inter / union)?;
    let cw = (px2.maximum(&tx2)? - px1.minimum(&tx1)?)?;
    let ch = (py2.maximum(&ty2)? - py1.minimum(&ty1)?)?;
    let cw = (cw + EPS)?;
    let ch = (ch + EPS)?;
    let dx = ((((&tx1 + &tx2)? - &px1)? - &px2)? * 0.5)?;
    let dy = ((((&ty1 + &ty2)? - &py1)? - &py2)? * 0.5)?;
    let sigma = ((dx.sqr()? + dy.sqr()?)? + EPS * EPS)?.sqrt()?;
    let sin_x = (dx.abs()? / &sigma)?;
    let sin_y = (dy.abs()? / &sigma)?;
    let pick_y = sin_x.gt(std::f64::consts::FRAC_1_SQRT_2)?;
    let sin_a = pick_y.where_cond(&sin_y, &sin_x)?;
    let cos_a = (sin_a.sqr()?.neg()? + 1.0)?.relu()?.sqrt()?;
    let angle = ((&sin_a * &cos_a)? * 2.0)?;
    let g = (angle - 2.0)?;
    let rho_x = (&dx / &cw)?.sqr()?;
    let rho_y = (&dy / &ch)?.sqr()?;
    let distance = (((g.mul(&rho_x)?.exp()? + g.mul(&rho_y)?.exp()?)?.neg()?) + 2.0)?;
    let ow = ((&w1 - &w2)?.abs()? / w1.maximum(&w2)?)?;
    let oh = ((&h1 - &h2)?.abs()? / h1.maximum(&h2)?)?;
    let shape_term = |o: &Tensor| -> Result<Tensor> {
        Ok((o.neg()?.exp()?.neg()? + 1.0)?.powf(theta)?)
    };
    let shape = (shape_term(&ow)? + shape_term(&oh)?)?;
    Ok(((iou.neg()? + 1.0)? + ((distance + shape)? * 0.5)?)?)
}

/// Distribution focal loss of one side: cross-entropy on the two bins
/// bracketing `target`, weighted by proximity.
pub fn dfl_loss(logits: &[f64], target: f64) -> Result<f64> {
    let n = logits.len();
    if n < 2 || !(0.0..=(n - 1) as f64).contains(&target) {
        return Err(Error::OutOfRange(format!(
            "DFL target {target} outside [0, {}]",
            n.saturating_sub(1)
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let left = (target.floor() as usize).min(n - 1);
    let right = (left + 1).min(n - 1);
    let wr = target - left as f64;
    let wl = 1.0 - wr;
    let mut loss = wl * (lse - logits[left]);
    if wr > 0.0 {
        loss += wr * (lse - logits[right]);
    }
    Ok(loss)
}

/// Differentiable DFL: (n, reg_max) logits, targets in bins → (n).
pub fn dfl_loss_tensor(logits: &Tensor, targets: &[f64]) -> Result<Tensor> {
    let (n, reg_max) = logits.dims2()?;
    let mut w = vec![0f64; n * reg_max];
    for (i, &t) in targets.iter().enumerate() {
        if !(0.0..=(reg_max - 1) as f64).contains(&t) {
            return Err(Error::OutOfRange(format!(
                "DFL target {t} outside [0, {}]",
                reg_max - 1
            )));
        }
        let left = (t.floor() as usize).min(reg_max - 1);
        let right = (left + 1).min(reg_max - 1);
        let wr = t - left as f64;
        w[i * reg_max + left] += 1.0 - wr;
        w[i * reg_max + right] += wr;
    }
    let w = Tensor::from_vec(w, (n, reg_max), logits.device())?.to_dtype(logits.dtype())?;
    Ok(log_softmax_last(logits)?.mul(&w)?.sum(D::Minus1)?.neg()?)
}

/// Elementwise binary cross-entropy on sigmoid(logits), numerically stable.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - logits.mul(targets)?)? + softplus)?)
}

/// Per-location assignment of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageAssignment {
    /// Ground-truth index per location, `None` for background.
    pub matched: Vec<Option<usize>>,
    /// Normalised alignment (soft class target) per location, in [0, 1].
    pub score: Vec<f64>,
}

impl ImageAssignment {
    pub fn positives(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }
}

/// Task-aligned top-k assignment for one image.
///
/// `scores` is (A, num_classes) sigmoid output, `pred_boxes` the decoded
/// predictions. Candidates are locations whose centre lies strictly inside a
/// ground truth; alignment is `score^alpha · IoU^beta`. Each ground truth
/// takes its top-k candidates (ties → lower location index). A location
/// claimed by several ground truths joins the one with higher alignment
/// (ties → lower ground-truth index). A ground truth left empty while it has
/// candidates takes back its best candidate from an owner holding more than
/// one location.
pub fn assign_image(
    anchors: &Anchors,
    scores: &[Vec<f64>],
    pred_boxes: &[[f64; 4]],
    gts: &Targets,
    cfg: &AssignerConfig,
) -> ImageAssignment {
    let a = anchors.len();
    let mut matched: Vec<Option<usize>> = vec![None; a];
    let mut score = vec![0.0; a];
    if gts.is_empty() {
        return ImageAssignment { matched, score };
    }
    struct GtInfo {
        candidates: Vec<usize>,
        align: Vec<f64>,
        iou: Vec<f64>,
    }
    let infos: Vec<GtInfo> = gts
        .boxes
        .iter()
        .zip(&gts.classes)
        .map(|(gt, &cls)| {
            let candidates: Vec<usize> = (0..a)
                .filter(|&i| {
                    let (x, y) = anchors.centers[i];
                    gt.area() > 0.0 && gt.contains_point(x, y)
                })
                .collect();
            let mut align = Vec::with_capacity(candidates.len());
            let mut ious = Vec::with_capacity(candidates.len());
            for &i in &candidates {
                let p = pred_boxes[i];
                let iou = BBox::new(p[0], p[1], p[2], p[3]).iou(gt).clamp(0.0, 1.0);
                let s = scores[i].get(cls).copied().unwrap_or(0.0).clamp(0.0, 1.0);
                align.push(s.powf(cfg.alpha) * iou.powf(cfg.beta));
                ious.push(iou);
            }
            GtInfo {
                candidates,
                align,
                iou: ious,
            }
        })
        .collect();

    // top-k per ground truth
    let mut claims: Vec<Vec<(usize, f64)>> = vec![Vec::new(); a];
    for (g, info) in infos.iter().enumerate() {
        let mut order: Vec<usize> = (0..info.candidates.len()).collect();
        order.sort_by(|&p, &q| {
            info.align[q]
                .total_cmp(&info.align[p])
                .then(info.candidates[p].cmp(&info.candidates[q]))
        });
        for &j in order.iter().take(cfg.top_k) {
            claims[info.candidates[j]].push((g, info.align[j]));
        }
    }
    for (loc, c) in claims.iter().enumerate() {
        // higher alignment wins; equal alignment keeps the lower index
        let best = c.iter().fold(None::<(usize, f64)>, |best, &(g, al)| match best {
            Some((bg, bal)) if bal > al || (bal == al && bg < g) => Some((bg, bal)),
            _ => Some((g, al)),
        });
        matched[loc] = best.map(|(g, _)| g);
    }
    // ground truths that lost every claim reclaim their best candidate
    for (g, info) in infos.iter().enumerate() {
        if info.candidates.is_empty() || matched.contains(&Some(g)) {
            continue;
        }
        let mut order: Vec<usize> = (0..info.candidates.len()).collect();
        order.sort_by(|&p, &q| {
            info.align[q]
                .total_cmp(&info.align[p])
                .then(info.candidates[p].cmp(&info.candidates[q]))
        });
        for &j in &order {
            let loc = info.candidates[j];
            let steal = match matched[loc] {
                None => true,
                Some(owner) => matched.iter().filter(|m| **m == Some(owner)).count() > 1,
            };
            if steal {
                matched[loc] = Some(g);
                break;
            }
        }
    }
    // soft targets: alignment normalised per ground truth, scaled by its best IoU
    for (g, info) in infos.iter().enumerate() {
        let mut max_align: f64 = 0.0;
        let mut max_iou: f64 = 0.0;
        for (j, &loc) in info.candidates.iter().enumerate() {
            if matched[loc] == Some(g) {
                max_align = max_align.max(info.align[j]);
                max_iou = max_iou.max(info.iou[j]);
            }
        }
        for (j, &loc) in info.candidates.iter().enumerate() {
            if matched[loc] == Some(g) {
                score[loc] = if max_align > 0.0 {
                    (info.align[j] / max_align * max_iou).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
        }
    }
    ImageAssignment { matched, score }
}

/// Assignments for a batch, computed on detached predictions.
#[derive(Debug, Clone)]
pub struct AssignmentResult {
    pub images: Vec<ImageAssignment>,
}

impl AssignmentResult {
    pub fn positives(&self) -> usize {
        self.images.iter().map(|i| i.positives()).sum()
    }
}

pub fn assign_targets(
    raw: &RawHeadOutput,
    gts: &[Targets],
    cfg: &AssignerConfig,
) -> Result<AssignmentResult> {
    let flat = raw.flatten()?;
    let boxes = distances_to_boxes(&distribution_expectation(&flat.dist)?, &flat.anchors)?;
    let boxes = boxes.detach().to_dtype(DType::F64)?.to_vec3::<f64>()?;
    let scores = sigmoid(&flat.cls.detach())?.to_dtype(DType::F64)?.to_vec3::<f64>()?;
    let images = gts
        .iter()
        .enumerate()
        .map(|(i, gt)| {
            let pb: Vec<[f64; 4]> = boxes[i].iter().map(|b| [b[0], b[1], b[2], b[3]]).collect();
            assign_image(&flat.anchors, &scores[i], &pb, gt, cfg)
        })
        .collect();
    Ok(AssignmentResult { images })
}

/// Loss components; `total = γ·bce + ζ·dfl + η·siou`.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Tensor,
    pub bce: Tensor,
    pub dfl: Tensor,
    pub siou: Tensor,
    pub positives: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub bce: f64,
    pub dfl: f64,
    pub siou: f64,
}

impl LossOutput {
    pub fn values(&self) -> Result<LossValues> {
        let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossValues {
            total: s(&self.total)?,
            bce: s(&self.bce)?,
            dfl: s(&self.dfl)?,
            siou: s(&self.siou)?,
        })
    }
}

pub fn combine(cfg: &LossConfig, bce: f64, dfl: f64, siou: f64) -> f64 {
    cfg.gamma * bce + cfg.zeta * dfl + cfg.eta * siou
}

/// Composite loss for a batch, given a precomputed assignment.
///
/// All three terms are sums normalised by the number of positive locations
/// (minimum 1); DFL averages its four sides.
pub fn loss_with_assignment(
    raw: &RawHeadOutput,
    gts: &[Targets],
    assignment: &AssignmentResult,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let flat = raw.flatten()?;
    let (b, a, nc) = flat.cls.dims3()?;
    let reg_max = raw.reg_max;
    let dev = flat.cls.device().clone();
    let dtype = flat.cls.dtype();
    let positives = assignment.positives();
    let norm = positives.max(1) as f64;

    let mut cls_target = vec![0f64; b * a * nc];
    let mut pos_index: Vec<u32> = Vec::new();
    let mut pos_boxes: Vec<f64> = Vec::new();
    let mut dfl_targets: Vec<f64> = Vec::new();
    for (bi, img) in assignment.images.iter().enumerate() {
        for (loc, m) in img.matched.iter().enumerate() {
            let Some(g) = *m else { continue };
            let cls = gts[bi].classes[g];
            cls_target[(bi * a + loc) * nc + cls] = img.score[loc];
            pos_index.push((bi * a + loc) as u32);
            let gt = gts[bi].boxes[g];
            pos_boxes.extend_from_slice(&gt.to_array());
            let (cx, cy) = flat.anchors.centers[loc];
            let s = flat.anchors.strides[loc];
            let hi = reg_max as f64 - 1.0 - 0.01;
            for d in [cx - gt.x1, cy - gt.y1, gt.x2 - cx, gt.y2 - cy] {
                dfl_targets.push((d / s).clamp(0.0, hi));
            }
        }
    }
    let cls_target = Tensor::from_vec(cls_target, (b, a, nc), &dev)?.to_dtype(dtype)?;
    let bce = (bce_with_logits(&flat.cls, &cls_target)?.sum_all()? / norm)?;

    let (dfl, siou) = if pos_index.is_empty() {
        let zero = Tensor::zeros((), dtype, &dev)?;
        (zero.clone(), zero)
    } else {
        let n = pos_index.len();
        let idx = Tensor::from_vec(pos_index, n, &dev)?;
        let dist = flat.dist.reshape((b * a, 4, reg_max))?.index_select(&idx, 0)?;
        let dfl = (dfl_loss_tensor(&dist.reshape((n * 4, reg_max))?, &dfl_targets)?
            .sum_all()?
            / (4.0 * norm))?;
        let exp = distribution_expectation(&dist)?; // (n, 4)
        let strides: Vec<f64> = assignment
            .images
            .iter()
            .flat_map(|img| {
                img.matched
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| m.is_some())
                    .map(|(loc, _)| loc)
                    .collect::<Vec<_>>()
            })
            .map(|loc| flat.anchors.strides[loc])
            .collect();
        let centers: Vec<f64> = assignment
            .images
            .iter()
            .flat_map(|img| {
                img.matched
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| m.is_some())
                    .map(|(loc, _)| loc)
                    .collect::<Vec<_>>()
            })
            .flat_map(|loc| {
                let (x, y) = flat.anchors.centers[loc];
                [x, y, x, y]
            })
            .collect();
        let stride = Tensor::from_vec(strides, (n, 1), &dev)?.to_dtype(dtype)?;
        let centers = Tensor::from_vec(centers, (n, 4), &dev)?.to_dtype(dtype)?;
        let sign = Tensor::new(&[-1f64, -1., 1., 1.], &dev)?
            .to_dtype(dtype)?
            .reshape((1, 4))?;
        let pred = (centers + exp.broadcast_mul(&stride)?.broadcast_mul(&sign)?)?;
        let target = Tensor::from_vec(pos_boxes, (n, 4), &dev)?.to_dtype(dtype)?;
        let siou = (siou_loss_tensor(&pred, &target, cfg.siou_theta)?.sum_all()? / norm)?;
        (dfl, siou)
    };
    let total = (((&bce * cfg.gamma)? + (&dfl * cfg.zeta)?)? + (&siou * cfg.eta)?)?;
    Ok(LossOutput {
        total,
        bce,
        dfl,
        siou,
        positives,
    })
}

/// Assigns targets on the detached predictions, then evaluates the loss.
pub fn total_loss(raw: &RawHeadOutput, gts: &[Targets], cfg: &LossConfig) -> Result<LossOutput> {
    let assignment = assign_targets(raw, gts, &cfg.assigner)?;
    loss_with_assignment(raw, gts, &assignment, cfg)
}
