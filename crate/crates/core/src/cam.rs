//! Gradient-weighted class activation maps on named backbone/neck layers.

use candle_core::{DType, Tensor};
use image::{imageops, ImageBuffer, Luma, RgbImage};

use crate::data::{image_to_tensor, letterbox};
use crate::error::{Error, Result};
use crate::network::{Model, TAP_LAYERS};
use crate::nn::{sigmoid, Ctx, Tap};

/// Row-major heatmap with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl Heatmap {
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    fn to_image(&self) -> ImageBuffer<Luma<f32>, Vec<f32>> {
        ImageBuffer::from_raw(self.width as u32, self.height as u32, self.values.clone())
            .expect("buffer matches dimensions")
    }

    fn from_image(img: &ImageBuffer<Luma<f32>, Vec<f32>>) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            values: img.as_raw().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Bilinear resize, clamped to [0, 1].
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let img = imageops::resize(&self.to_image(), width as u32, height as u32, imageops::FilterType::Triangle);
        Self::from_image(&img)
    }

    fn cropped(&self, x: usize, y: usize, w: usize, h: usize) -> Self {
        let img = imageops::crop_imm(&self.to_image(), x as u32, y as u32, w as u32, h as u32).to_image();
        Self::from_image(&img)
    }
}

/// Combines a (c, h, w) activation with its gradient: channel weights are
/// spatial gradient means, the map is the rectified weighted sum scaled to
/// a maximum of 1 (all zeros when nothing is positive).
pub fn cam_from_gradients(activation: &[f32], gradient: &[f32], (c, h, w): (usize, usize, usize)) -> Heatmap {
    let hw = h * w;
    let mut map = vec![0f32; hw];
    for ci in 0..c {
        let g = &gradient[ci * hw..(ci + 1) * hw];
        let weight = g.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        if weight == 0.0 {
            continue;
        }
        for (m, a) in map.iter_mut().zip(&activation[ci * hw..(ci + 1) * hw]) {
            *m += (weight * *a as f64) as f32;
        }
    }
    let max = map.iter().copied().fold(0f32, f32::max);
    let values = if max > 0.0 {
        map.iter().map(|v| (v.max(0.0) / max).min(1.0)).collect()
    } else {
        vec![0.0; hw]
    };
    Heatmap {
        width: w,
        height: h,
        values,
    }
}

fn check_layer(layer: &str) -> Result<()> {
    if TAP_LAYERS.contains(&layer) {
        Ok(())
    } else {
        Err(Error::UnknownLayer {
            name: layer.to_string(),
            valid: TAP_LAYERS.iter().map(|s| s.to_string()).collect(),
        })
    }
}

/// Grad-CAM at layer resolution for one (1, 3, S, S) input. The explained
/// score is the summed sigmoid confidence of the top-scoring class over all
/// locations.
pub fn grad_cam(model: &Model, input: &Tensor, layer: &str) -> Result<Heatmap> {
    check_layer(layer)?;
    let tap = Tap::new(layer);
    let raw = model.forward(input, &Ctx::eval().with_tap(&tap))?;
    let var = tap
        .captured()
        .ok_or_else(|| Error::UnknownLayer {
            name: layer.to_string(),
            valid: tap.seen(),
        })?;
    let flat = raw.flatten()?;
    let scores = sigmoid(&flat.cls)?; // (1, A, nc)
    let best = scores
        .max(1)?
        .squeeze(0)?
        .to_dtype(DType::F32)?
        .to_vec1::<f32>()?
        .iter()
        .enumerate()
        .fold((0usize, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
        .0;
    let objective = scores.narrow(2, best, 1)?.sum_all()?;
    let grads = objective.backward()?;
    let act = var.as_tensor();
    let (_, c, h, w) = act.dims4()?;
    let grad = match grads.get(act) {
        Some(g) => g.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
        None => vec![0.0; c * h * w],
    };
    let act = act.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(cam_from_gradients(&act, &grad, (c, h, w)))
}

/// Jet-style colour for t in [0, 1].
fn jet(t: f32) -> [f32; 3] {
    let f = |x: f32| (1.5 - (4.0 * t - x).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

pub fn blend(image: &RgbImage, heat: &Heatmap, alpha: f32) -> RgbImage {
    let mut out = image.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let c = jet(heat.at(x as usize, y as usize));
        p.0 = std::array::from_fn(|i| {
            ((1.0 - alpha) * p.0[i] as f32 + alpha * 255.0 * c[i]).round().clamp(0.0, 255.0) as u8
        });
    }
    out
}

/// Heatmap over the original image (same size) and its alpha-blended overlay.
pub fn cam_image(model: &Model, image: &RgbImage, layer: &str) -> Result<(Heatmap, RgbImage)> {
    check_layer(layer)?;
    let size = model.config().input_size;
    let (canvas, _, tf) = letterbox(image, &[], size);
    let x = image_to_tensor(&canvas)?.unsqueeze(0)?;
    let heat = grad_cam(model, &x, layer)?.resized(size, size);
    let (w, h) = (image.width() as usize, image.height() as usize);
    let cw = ((w as f64 * tf.scale).round() as usize).clamp(1, size);
    let ch = ((h as f64 * tf.scale).round() as usize).clamp(1, size);
    let heat = heat
        .cropped(tf.pad_left as usize, tf.pad_top as usize, cw, ch)
        .resized(w, h);
    let overlay = blend(image, &heat, 0.5);
    Ok((heat, overlay))
}

pub fn save_overlay(overlay: &RgbImage, path: &std::path::Path) -> Result<()> {
    overlay.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}
