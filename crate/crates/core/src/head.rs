//! Raw detector outputs and their decoding into boxes.

use candle_core::{Tensor, D};

use crate::boxes::{BBox, Detection};
use crate::error::Result;
use crate::nn::softmax;

/// One pyramid level of raw head output.
#[derive(Debug, Clone)]
pub struct LevelOutput {
    pub stride: usize,
    /// (b, num_classes, h, w)
    pub cls: Tensor,
    /// (b, 4·reg_max, h, w), sides ordered left, top, right, bottom.
    pub dist: Tensor,
}

#[derive(Debug, Clone)]
pub struct RawHeadOutput {
    pub levels: Vec<LevelOutput>,
    pub num_classes: usize,
    pub reg_max: usize,
}

/// Cell centres and strides of every location, in level order then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchors {
    pub centers: Vec<(f64, f64)>,
    pub strides: Vec<f64>,
}

impl Anchors {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn for_grids(grids: &[(usize, usize, usize)]) -> Self {
        let mut centers = Vec::new();
        let mut strides = Vec::new();
        for &(stride, h, w) in grids {
            for y in 0..h {
                for x in 0..w {
                    centers.push(((x as f64 + 0.5) * stride as f64, (y as f64 + 0.5) * stride as f64));
                    strides.push(stride as f64);
                }
            }
        }
        Self { centers, strides }
    }
}

/// All levels flattened to anchor-major layout.
#[derive(Debug, Clone)]
pub struct FlatOutput {
    /// (b, A, num_classes)
    pub cls: Tensor,
    /// (b, A, 4, reg_max)
    pub dist: Tensor,
    pub anchors: Anchors,
}

impl RawHeadOutput {
    pub fn batch(&self) -> Result<usize> {
        Ok(self.levels[0].cls.dim(0)?)
    }

    pub fn anchors(&self) -> Result<Anchors> {
        let grids = self
            .levels
            .iter()
            .map(|l| {
                let (_, _, h, w) = l.cls.dims4()?;
                Ok((l.stride, h, w))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Anchors::for_grids(&grids))
    }

    pub fn flatten(&self) -> Result<FlatOutput> {
        let mut cls = Vec::with_capacity(self.levels.len());
        let mut dist = Vec::with_capacity(self.levels.len());
        for l in &self.levels {
            let (b, nc, h, w) = l.cls.dims4()?;
            cls.push(l.cls.reshape((b, nc, h * w))?.transpose(1, 2)?);
            dist.push(
                l.dist
                    .reshape((b, 4, self.reg_max, h * w))?
                    .permute((0, 3, 1, 2))?,
            );
        }
        Ok(FlatOutput {
            cls: Tensor::cat(&cls, 1)?,
            dist: Tensor::cat(&dist, 1)?,
            anchors: self.anchors()?,
        })
    }
}

/// Expected bin index per side: (…, reg_max) logits → (…) in bin units.
pub fn distribution_expectation(dist_logits: &Tensor) -> Result<Tensor> {
    let reg_max = dist_logits.dim(D::Minus1)?;
    let probs = softmax(dist_logits, D::Minus1)?;
    let bins = Tensor::arange(0u32, reg_max as u32, dist_logits.device())?
        .to_dtype(dist_logits.dtype())?;
    Ok(probs.broadcast_mul(&bins)?.sum(D::Minus1)?)
}

/// (b, A, 4) side distances in bin units → (b, A, 4) corner boxes in pixels.
pub fn distances_to_boxes(dist: &Tensor, anchors: &Anchors) -> Result<Tensor> {
    let dev = dist.device();
    let dtype = dist.dtype();
    let a = anchors.len();
    let cx: Vec<f64> = anchors.centers.iter().map(|c| c.0).collect();
    let cy: Vec<f64> = anchors.centers.iter().map(|c| c.1).collect();
    let centers = Tensor::stack(
        &[
            Tensor::new(cx.as_slice(), dev)?,
            Tensor::new(cy.as_slice(), dev)?,
        ],
        1,
    )?
    .to_dtype(dtype)?
    .reshape((1, a, 2))?;
    let strides = Tensor::new(anchors.strides.as_slice(), dev)?
        .to_dtype(dtype)?
        .reshape((1, a, 1))?;
    let scaled = dist.broadcast_mul(&strides)?;
    let lt = scaled.narrow(2, 0, 2)?;
    let rb = scaled.narrow(2, 2, 2)?;
    let tl = centers.broadcast_sub(&lt)?;
    let br = centers.broadcast_add(&rb)?;
    Ok(Tensor::cat(&[tl, br], 2)?)
}

/// Decoded, pre-NMS predictions for a whole batch.
#[derive(Debug, Clone)]
pub struct Decoded {
    /// (b, A, 4) boxes in pixels.
    pub boxes: Vec<Vec<[f64; 4]>>,
    /// (b, A, num_classes) sigmoid scores.
    pub scores: Vec<Vec<Vec<f64>>>,
}

pub fn decode(raw: &RawHeadOutput) -> Result<Decoded> {
    let flat = raw.flatten()?;
    let dist = distribution_expectation(&flat.dist)?;
    let boxes = distances_to_boxes(&dist, &flat.anchors)?;
    let scores = crate::nn::sigmoid(&flat.cls)?;
    let boxes = boxes
        .to_dtype(candle_core::DType::F64)?
        .to_vec3::<f64>()?
        .into_iter()
        .map(|img| img.into_iter().map(|b| [b[0], b[1], b[2], b[3]]).collect())
        .collect();
    let scores = scores.to_dtype(candle_core::DType::F64)?.to_vec3::<f64>()?;
    Ok(Decoded { boxes, scores })
}

/// Per-image detections above `score_thr`, one per location (best class),
/// clipped to `size × size`. Scores sorted descending.
pub fn decode_boxes(raw: &RawHeadOutput, score_thr: f64, size: f64) -> Result<Vec<Vec<Detection>>> {
    let d = decode(raw)?;
    Ok(d.boxes
        .iter()
        .zip(&d.scores)
        .map(|(boxes, scores)| {
            let mut dets: Vec<Detection> = boxes
                .iter()
                .zip(scores)
                .filter_map(|(b, s)| {
                    let (class_id, score) = s
                        .iter()
                        .copied()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
                    let bbox = BBox::new(b[0], b[1], b[2], b[3]).clip(size, size);
                    (score >= score_thr && bbox.is_valid()).then_some(Detection {
                        bbox,
                        score,
                        class_id,
                    })
                })
                .collect();
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            dets
        })
        .collect())
}
