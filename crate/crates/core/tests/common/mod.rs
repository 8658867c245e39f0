#![allow(dead_code)]

pub mod oracle;

use candle_core::{DType, Device, Tensor};
use lsm_yolo::boxes::{BBox, Targets};
use lsm_yolo::network::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Smallest useful model: quarter widths, 64×64 input.
pub fn tiny_config(num_classes: usize) -> ModelConfig {
    let mut cfg = ModelConfig::default().scaled_widths(0.25);
    cfg.input_size = 64;
    cfg.num_classes = num_classes;
    cfg
}

pub fn tiny_model(seed: u64, dtype: DType) -> Model {
    Model::build(&tiny_config(3), seed, dtype).unwrap()
}

pub fn random_box(r: &mut impl Rng, size: f64, min: f64, max: f64) -> BBox {
    let w = r.random_range(min..max);
    let h = r.random_range(min..max);
    let x = r.random_range(0.0..size - w);
    let y = r.random_range(0.0..size - h);
    BBox::from_xywh(x, y, w, h)
}

pub fn random_targets(r: &mut impl Rng, n: usize, size: f64, classes: usize) -> Targets {
    let boxes = (0..n).map(|_| random_box(r, size, 6.0, size / 2.0)).collect();
    let classes = (0..n).map(|_| r.random_range(0..classes)).collect();
    Targets { boxes, classes }
}
