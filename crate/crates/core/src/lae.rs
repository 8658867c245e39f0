//! Lightweight adaptive extraction: a 2×2 downsampling block.
//!
//! The input is regrouped into four neighbour slices (top-left, top-right,
//! bottom-left, bottom-right of every 2×2 cell). A grouped convolution whose
//! weights are shared across the four slices extracts features from each
//! slice, and a softmax over per-location logits (2×2 average pool followed by
//! a 1×1 convolution) decides how much each slice contributes to the output
//! cell. An optional grouped 1×1 projection maps the channel count.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax, Conv2d, ConvSpec, Ctx, Path};

/// Number of neighbour slices produced by one 2×2 regrouping.
pub const SLICES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaeConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channel groups of the shared-weight convolution and of the projection.
    pub groups: usize,
    pub kernel_size: usize,
    /// Grouped (lightweight) extraction; off = ungrouped convolution.
    pub enable_le: bool,
    /// Softmax-weighted slice fusion; off = plain mean over slices.
    pub enable_ae: bool,
    /// Channel projection when `in_channels != out_channels`.
    pub enable_dm: bool,
}

impl LaeConfig {
    pub fn new(in_channels: usize, out_channels: usize, groups: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            groups,
            kernel_size: 1,
            enable_le: true,
            enable_ae: true,
            enable_dm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::InvalidConfig("LAE groups must be >= 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig("LAE channels must be >= 1".into()));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::InvalidConfig(format!(
                "LAE channels {}->{} not divisible by {} groups",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "LAE kernel size {} must be odd",
                self.kernel_size
            )));
        }
        if !self.enable_dm && self.in_channels != self.out_channels {
            return Err(Error::ConfigMismatch(format!(
                "LAE without dimension mapping needs equal channels, got {}->{}",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    fn needs_projection(&self) -> bool {
        self.enable_dm && self.in_channels != self.out_channels
    }
}

fn check_even(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddSpatialDims {
            height: h,
            width: w,
        });
    }
    Ok((b, c, h, w))
}

/// (b, c, h, w) → (b, c, h/2, w/2, 4), slices in row-major 2×2 order.
pub fn space_to_depth_regroup(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = check_even(x)?;
    Ok(x.reshape((b, c, h / 2, 2, w / 2, 2))?
        .permute((0, 1, 2, 4, 3, 5))?
        .reshape((b, c, h / 2, w / 2, SLICES))?)
}

/// Inverse of [`space_to_depth_regroup`].
pub fn depth_to_space(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w, n) = x.dims5()?;
    if n != SLICES {
        return Err(Error::ConfigMismatch(format!("expected 4 slices, got {n}")));
    }
    Ok(x.reshape((b, c, h, w, 2, 2))?
        .permute((0, 1, 2, 4, 3, 5))?
        .reshape((b, c, h * 2, w * 2))?)
}

/// Regroup straight into a slice-major batch: (b, c, h, w) → (b·4, c, h/2, w/2).
fn regroup_as_batch(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = check_even(x)?;
    Ok(x.reshape((b, c, h / 2, 2, w / 2, 2))?
        .permute((0, 3, 5, 1, 2, 4))?
        .reshape((b * SLICES, c, h / 2, w / 2))?)
}

/// Applies `conv` identically to each of the four slices of a regrouped map.
pub fn lightweight_branch(fm5: &Tensor, conv: &Conv2d, ctx: &Ctx) -> Result<Tensor> {
    let (b, c, h, w, n) = fm5.dims5()?;
    let batched = fm5
        .permute((0, 4, 1, 2, 3))?
        .reshape((b * n, c, h, w))?;
    let y = conv.forward(&batched, ctx)?;
    let cout = y.dim(1)?;
    Ok(y.reshape((b, n, cout, h, w))?.permute((0, 2, 3, 4, 1))?)
}

#[derive(Debug, Clone)]
pub struct Lae {
    cfg: LaeConfig,
    name: String,
    extract: Conv2d,
    weight_logits: Option<Conv2d>,
    projection: Option<Conv2d>,
}

impl Lae {
    pub fn new(p: &Path, cfg: LaeConfig) -> Result<Self> {
        cfg.validate()?;
        let groups = if cfg.enable_le { cfg.groups } else { 1 };
        let extract = Conv2d::new(
            &p.pp("extract"),
            ConvSpec::new(cfg.in_channels, cfg.in_channels, cfg.kernel_size).groups(groups),
        )?;
        let weight_logits = if cfg.enable_ae {
            Some(Conv2d::new(
                &p.pp("weights"),
                ConvSpec::new(cfg.in_channels, SLICES, 1).bias(true),
            )?)
        } else {
            None
        };
        let projection = if cfg.needs_projection() {
            Some(Conv2d::new(
                &p.pp("project"),
                ConvSpec::new(cfg.in_channels, cfg.out_channels, 1).groups(cfg.groups),
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            name: p.name().to_string(),
            extract,
            weight_logits,
            projection,
        })
    }

    pub fn config(&self) -> &LaeConfig {
        &self.cfg
    }

    pub fn extract_conv(&self) -> &Conv2d {
        &self.extract
    }

    pub fn weight_conv(&self) -> Option<&Conv2d> {
        self.weight_logits.as_ref()
    }

    pub fn projection(&self) -> Option<&Conv2d> {
        self.projection.as_ref()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, _, _) = check_even(x)?;
        if c != self.cfg.in_channels {
            return Err(Error::ConfigMismatch(format!(
                "{}: expected {} channels, got {c}",
                self.name, self.cfg.in_channels
            )));
        }
        Ok(())
    }

    /// Slice logits as (b, 4, h/2, w/2); `None` when adaptive extraction is off.
    fn logits(&self, x: &Tensor, ctx: &Ctx) -> Result<Option<Tensor>> {
        match &self.weight_logits {
            Some(conv) => {
                let pooled = x.avg_pool2d(2)?;
                Ok(Some(conv.forward(&pooled, ctx)?))
            }
            None => Ok(None),
        }
    }

    /// Per-location slice weights, (b, 1, h/2, w/2, 4), each location summing to 1.
    pub fn adaptive_weights(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        self.check_input(x)?;
        let (b, _, h, w) = x.dims4()?;
        let weights = match self.logits(x, ctx)? {
            Some(l) => softmax(&l, 1)?,
            None => Tensor::full(0.25, (b, SLICES, h / 2, w / 2), x.device())?
                .to_dtype(x.dtype())?,
        };
        Ok(weights.permute((0, 2, 3, 1))?.unsqueeze(1)?)
    }

    /// Grouped projection to `out_channels`, or identity when not needed.
    pub fn dimension_mapping(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        match &self.projection {
            Some(conv) => conv.forward(x, ctx),
            None => Ok(x.clone()),
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        self.check_input(x)?;
        let (b, _, h, w) = x.dims4()?;
        let (h2, w2) = (h / 2, w / 2);
        let slices = regroup_as_batch(x)?;
        let feats = self.extract.forward(&slices, ctx)?;
        let c = feats.dim(1)?;
        let feats = feats.reshape((b, SLICES, c, h2, w2))?;
        let fused = match self.logits(x, ctx)? {
            Some(logits) => {
                let weights = softmax(&logits, 1)?.unsqueeze(2)?;
                ctx.record(&self.name, (SLICES * c * h2 * w2) as u64);
                feats.broadcast_mul(&weights)?.sum(1)?
            }
            None => feats.mean(1)?,
        };
        // The projection is affine and the weights sum to one per location, so
        // projecting after fusion equals projecting every slice before it.
        self.dimension_mapping(&fused, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn tensor(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn regroup_2x2_row_major() {
        let x = tensor(&[1., 2., 3., 4.], &[1, 1, 2, 2]);
        let y = space_to_depth_regroup(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1, 4]);
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1., 2., 3., 4.]);
    }

    #[test]
    fn regroup_rejects_odd_dims() {
        let x = Tensor::zeros((1, 2, 3, 4), DType::F64, &Device::Cpu).unwrap();
        let err = space_to_depth_regroup(&x).unwrap_err();
        assert_eq!(err.kind(), "odd-spatial-dims");
    }

    #[test]
    fn regroup_roundtrip_is_bit_exact() {
        let x = Tensor::randn(0f32, 1., (2, 3, 6, 8), &Device::Cpu).unwrap();
        let back = depth_to_space(&space_to_depth_regroup(&x).unwrap()).unwrap();
        let a = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = back.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn regroup_as_batch_agrees_with_public_layout() {
        let x = Tensor::randn(0f64, 1., (2, 3, 4, 6), &Device::Cpu).unwrap();
        let a = space_to_depth_regroup(&x)
            .unwrap()
            .permute((0, 4, 1, 2, 3))
            .unwrap()
            .reshape((8, 3, 2, 3))
            .unwrap();
        let b = regroup_as_batch(&x).unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn disabled_dm_with_channel_change_is_rejected() {
        let mut cfg = LaeConfig::new(8, 16, 4);
        cfg.enable_dm = false;
        assert_eq!(cfg.validate().unwrap_err().kind(), "config-mismatch");
    }

    #[test]
    fn output_shape_halves_spatial_dims() {
        let store = ParamStore::new(0, DType::F32);
        let lae = Lae::new(&store.root(), LaeConfig::new(64, 128, 4)).unwrap();
        let x = Tensor::randn(0f32, 1., (1, 64, 64, 64), &Device::Cpu).unwrap();
        let y = lae.forward(&x, &Ctx::eval()).unwrap();
        assert_eq!(y.dims(), &[1, 128, 32, 32]);
    }

    #[test]
    fn zeroed_logits_give_quarter_weights() {
        let store = ParamStore::new(1, DType::F64);
        let lae = Lae::new(&store.root(), LaeConfig::new(4, 4, 2)).unwrap();
        store.set("weights.weight", &Tensor::zeros((4, 4, 1, 1), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let x = Tensor::randn(0f64, 1., (1, 4, 6, 6), &Device::Cpu).unwrap();
        let w = lae.adaptive_weights(&x, &Ctx::eval()).unwrap();
        for v in w.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert_eq!(v, 0.25);
        }
    }
}
