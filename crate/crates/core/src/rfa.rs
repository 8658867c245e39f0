//! Receptive-field attention convolution.
//!
//! Every k×k receptive field is reweighted by its own softmax attention over
//! the k² positions (per input channel, computed from an average pool of the
//! field and a channel-wise 1×1 convolution) before a kernel shared across
//! all locations is applied.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax, unfold, BatchNorm2d, Conv2d, ConvSpec, Ctx, Init, Path, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfaConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
}

impl RfaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "RFA kernel size {} must be odd",
                self.kernel_size
            )));
        }
        if !(1..=2).contains(&self.stride) {
            return Err(Error::InvalidConfig(format!(
                "RFA stride {} must be 1 or 2",
                self.stride
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig("RFA channels must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RfaConv {
    cfg: RfaConfig,
    name: String,
    attention: Conv2d,
    weight: Var,
}

impl RfaConv {
    pub fn new(p: &Path, cfg: RfaConfig) -> Result<Self> {
        cfg.validate()?;
        let k2 = cfg.kernel_size * cfg.kernel_size;
        let attention = Conv2d::new(
            &p.pp("attention"),
            ConvSpec::new(cfg.in_channels, cfg.in_channels * k2, 1)
                .groups(cfg.in_channels)
                .bias(true),
        )?;
        let bound = 1.0 / ((cfg.in_channels * k2) as f64).sqrt();
        let weight = p.weight(
            "weight",
            &[cfg.out_channels, cfg.in_channels, cfg.kernel_size, cfg.kernel_size],
            Init::Uniform(bound),
        )?;
        Ok(Self {
            cfg,
            name: p.name().to_string(),
            attention,
            weight,
        })
    }

    pub fn config(&self) -> &RfaConfig {
        &self.cfg
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn attention_conv(&self) -> &Conv2d {
        &self.attention
    }

    fn window(&self) -> Window {
        Window::new(self.cfg.kernel_size, self.cfg.stride, self.cfg.kernel_size / 2)
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let dims = x.dims4()?;
        if dims.1 != self.cfg.in_channels {
            return Err(Error::ConfigMismatch(format!(
                "{}: expected {} channels, got {}",
                self.name, self.cfg.in_channels, dims.1
            )));
        }
        Ok(dims)
    }

    /// Attention over receptive-field positions, (b, c, k², oh·ow).
    fn attention_from_patches(
        &self,
        patches: &Tensor,
        (b, c, oh, ow): (usize, usize, usize, usize),
        ctx: &Ctx,
    ) -> Result<Tensor> {
        let k2 = self.cfg.kernel_size * self.cfg.kernel_size;
        let pooled = patches.mean(2)?.reshape((b, c, oh, ow))?;
        let logits = self.attention.forward(&pooled, ctx)?;
        softmax(&logits.reshape((b, c, k2, oh * ow))?, 2)
    }

    /// Per-location attention maps as (b, c, k², oh, ow); each sums to 1 over k².
    pub fn attention_map(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, c, h, w) = self.check(x)?;
        let win = self.window();
        let (oh, ow) = (win.out_dim(h), win.out_dim(w));
        let k2 = self.cfg.kernel_size * self.cfg.kernel_size;
        let patches = unfold(x, win)?.reshape((b, c, k2, oh * ow))?;
        let att = self.attention_from_patches(&patches, (b, c, oh, ow), ctx)?;
        Ok(att.reshape((b, c, k2, oh, ow))?)
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, c, h, w) = self.check(x)?;
        let win = self.window();
        let (oh, ow) = (win.out_dim(h), win.out_dim(w));
        let l = oh * ow;
        let k2 = self.cfg.kernel_size * self.cfg.kernel_size;
        let patches = unfold(x, win)?.reshape((b, c, k2, l))?;
        let att = self.attention_from_patches(&patches, (b, c, oh, ow), ctx)?;
        let weighted = (patches * att)?.reshape((b, c * k2, l))?;
        let cout = self.cfg.out_channels;
        let y = self
            .weight
            .reshape((cout, c * k2))?
            .broadcast_matmul(&weighted)?;
        ctx.record(&self.name, (c * k2 * l + cout * c * k2 * l) as u64);
        Ok(y.reshape((b, cout, oh, ow))?)
    }
}

/// RFA convolution followed by batch norm and SiLU.
#[derive(Debug, Clone)]
pub struct RfaBlock {
    conv: RfaConv,
    bn: BatchNorm2d,
}

impl RfaBlock {
    pub fn new(p: &Path, cfg: RfaConfig) -> Result<Self> {
        Ok(Self {
            conv: RfaConv::new(p, cfg)?,
            bn: BatchNorm2d::new(&p.pp("bn"), cfg.out_channels)?,
        })
    }

    pub fn conv(&self) -> &RfaConv {
        &self.conv
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.conv.forward(x, ctx)?;
        Ok(self.bn.forward(&y, ctx)?.silu()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn cfg(stride: usize) -> RfaConfig {
        RfaConfig {
            in_channels: 3,
            out_channels: 5,
            kernel_size: 3,
            stride,
        }
    }

    #[test]
    fn stride_one_keeps_spatial_dims() {
        let store = ParamStore::new(0, DType::F32);
        let rfa = RfaConv::new(&store.root(), cfg(1)).unwrap();
        let x = Tensor::randn(0f32, 1., (2, 3, 9, 7), &Device::Cpu).unwrap();
        assert_eq!(rfa.forward(&x, &Ctx::eval()).unwrap().dims(), &[2, 5, 9, 7]);
    }

    #[test]
    fn stride_two_halves() {
        let store = ParamStore::new(0, DType::F32);
        let rfa = RfaConv::new(&store.root(), cfg(2)).unwrap();
        let x = Tensor::randn(0f32, 1., (1, 3, 8, 8), &Device::Cpu).unwrap();
        assert_eq!(rfa.forward(&x, &Ctx::eval()).unwrap().dims(), &[1, 5, 4, 4]);
    }

    #[test]
    fn rejects_even_kernel_and_large_stride() {
        let mut c = cfg(1);
        c.kernel_size = 2;
        assert!(c.validate().is_err());
        let mut c = cfg(3);
        c.kernel_size = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn attention_sums_to_one() {
        let store = ParamStore::new(4, DType::F64);
        let rfa = RfaConv::new(&store.root(), cfg(1)).unwrap();
        let x = Tensor::randn(0f64, 2., (2, 3, 6, 5), &Device::Cpu).unwrap();
        let att = rfa.attention_map(&x, &Ctx::eval()).unwrap();
        for v in att.sum(2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }
}
