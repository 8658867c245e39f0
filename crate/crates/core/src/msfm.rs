//! Multipath shunt feature matching and the MatchNeck wrapper.
//!
//! Height, width and channel descriptors of the input are taken by axis
//! averaging. The height and width descriptors are concatenated into one
//! (b, c, h+w, 1) stream and passed through a shared bottleneck transform; the
//! transformed stream provides both the matched descriptors and (through a
//! sigmoid) their weights, and its spatial mean gates the channel descriptor.
//! The gated factors multiply the input, the result is concatenated with the
//! source and merged by a 1×1 convolution.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, BatchNorm2d, Conv2d, ConvBnAct, ConvSpec, Ctx, Path};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsfmConfig {
    pub channels: usize,
    pub with_residual: bool,
    /// Bottleneck ratio of the shared descriptor transform.
    pub reduction: usize,
    pub enable_spatial: bool,
    pub enable_channel: bool,
}

impl MsfmConfig {
    pub fn new(channels: usize, with_residual: bool) -> Self {
        Self {
            channels,
            with_residual,
            reduction: 2,
            enable_spatial: true,
            enable_channel: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !self.channels.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "MSFM channels {} must be even and positive",
                self.channels
            )));
        }
        if self.reduction == 0 || self.channels / self.reduction < 4 {
            return Err(Error::InvalidConfig(format!(
                "MSFM reduction {} leaves fewer than 4 of {} channels",
                self.reduction, self.channels
            )));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        self.channels / self.reduction
    }
}

/// Axis-averaged descriptors of one feature map.
#[derive(Debug, Clone)]
pub struct DirectionalDescriptors {
    /// (b, c, h, 1): mean over width.
    pub height: Tensor,
    /// (b, c, 1, w): mean over height.
    pub width: Tensor,
    /// (b, c, 1, 1): global mean.
    pub channel: Tensor,
}

pub fn directional_pools(x: &Tensor) -> Result<DirectionalDescriptors> {
    x.dims4()?;
    Ok(DirectionalDescriptors {
        height: x.mean_keepdim(3)?,
        width: x.mean_keepdim(2)?,
        channel: x.mean_keepdim((2, 3))?,
    })
}

/// (b,c,h,1) ⧺ (b,c,1,w) → (b,c,h+w,1)
pub fn concat_spatial(height: &Tensor, width: &Tensor) -> Result<Tensor> {
    let width = width.permute((0, 1, 3, 2))?;
    Ok(Tensor::cat(&[height, &width], 2)?)
}

/// Inverse of [`concat_spatial`], splitting at index `h`.
pub fn split_spatial(stream: &Tensor, h: usize) -> Result<(Tensor, Tensor)> {
    let total = stream.dim(2)?;
    let height = stream.narrow(2, 0, h)?;
    let width = stream.narrow(2, h, total - h)?.permute((0, 1, 3, 2))?;
    Ok((height, width))
}

/// Output of the spatial matching step.
#[derive(Debug, Clone)]
pub struct SpatialMatch {
    pub height: Tensor,
    pub height_weight: Tensor,
    pub width: Tensor,
    pub width_weight: Tensor,
    /// Sigmoid of the whole transformed stream, (b, c, h+w, 1).
    pub gate: Tensor,
}

/// Reduces the gate over its spatial axis and scales the channel descriptor.
pub fn channel_match(channel: &Tensor, gate: &Tensor) -> Result<Tensor> {
    Ok(channel.mul(&gate.mean_keepdim(2)?)?)
}

/// Shared bottleneck applied to the concatenated descriptor stream.
#[derive(Debug, Clone)]
struct Align {
    reduce: Conv2d,
    bn: BatchNorm2d,
    expand: Conv2d,
}

impl Align {
    fn new(p: &Path, cfg: &MsfmConfig) -> Result<Self> {
        Ok(Self {
            reduce: Conv2d::new(&p.pp("reduce"), ConvSpec::new(cfg.channels, cfg.hidden(), 1))?,
            bn: BatchNorm2d::new(&p.pp("bn"), cfg.hidden())?,
            expand: Conv2d::new(
                &p.pp("expand"),
                ConvSpec::new(cfg.hidden(), cfg.channels, 1).bias(true),
            )?,
        })
    }

    fn forward(&self, stream: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.reduce.forward(stream, ctx)?;
        let y = self.bn.forward(&y, ctx)?.silu()?;
        self.expand.forward(&y, ctx)
    }
}

#[derive(Debug, Clone)]
pub struct Msfm {
    cfg: MsfmConfig,
    name: String,
    align: Option<Align>,
    merge: Conv2d,
}

impl Msfm {
    pub fn new(p: &Path, cfg: MsfmConfig) -> Result<Self> {
        cfg.validate()?;
        let align = if cfg.enable_spatial || cfg.enable_channel {
            Some(Align::new(&p.pp("align"), &cfg)?)
        } else {
            None
        };
        let merge = Conv2d::new(
            &p.pp("merge"),
            ConvSpec::new(2 * cfg.channels, cfg.channels, 1).bias(true),
        )?;
        Ok(Self {
            cfg,
            name: p.name().to_string(),
            align,
            merge,
        })
    }

    pub fn config(&self) -> &MsfmConfig {
        &self.cfg
    }

    pub fn merge_conv(&self) -> &Conv2d {
        &self.merge
    }

    /// Shared transform of the descriptor stream, split into matched
    /// descriptors and their sigmoid weights.
    pub fn spatial_match(
        &self,
        d: &DirectionalDescriptors,
        ctx: &Ctx,
    ) -> Result<Option<SpatialMatch>> {
        let align = match &self.align {
            Some(a) => a,
            None => return Ok(None),
        };
        let h = d.height.dim(2)?;
        let stream = concat_spatial(&d.height, &d.width)?;
        let logits = align.forward(&stream, ctx)?;
        let gate = sigmoid(&logits)?;
        let (height, width) = split_spatial(&logits, h)?;
        let (height_weight, width_weight) = split_spatial(&gate, h)?;
        Ok(Some(SpatialMatch {
            height,
            height_weight,
            width,
            width_weight,
            gate,
        }))
    }

    /// The gated product before concatenation and merging.
    pub fn attend(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.cfg.channels {
            return Err(Error::ConfigMismatch(format!(
                "{}: expected {} channels, got {c}",
                self.name, self.cfg.channels
            )));
        }
        let d = directional_pools(x)?;
        let matched = self.spatial_match(&d, ctx)?;
        let plane = (c * h * w) as u64;
        let mut y = x.clone();
        if let Some(m) = &matched {
            if self.cfg.enable_channel {
                let gated = channel_match(&d.channel, &m.gate)?;
                y = y.broadcast_mul(&gated)?;
                ctx.record(&self.name, plane);
            }
            if self.cfg.enable_spatial {
                let fh = m.height.mul(&m.height_weight)?;
                let fw = m.width.mul(&m.width_weight)?;
                y = y.broadcast_mul(&fh)?.broadcast_mul(&fw)?;
                ctx.record(&self.name, 2 * plane);
            }
        }
        if self.cfg.with_residual {
            y = (y + x)?;
        }
        Ok(y)
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let attended = self.attend(x, ctx)?;
        let merged = Tensor::cat(&[x, &attended], 1)?;
        self.merge.forward(&merged, ctx)
    }
}

/// Split/shunt wrapper: half the channels bypass, half run through a chain
/// of MSFM units, then both are concatenated and projected.
#[derive(Debug, Clone)]
pub struct MatchNeck {
    name: String,
    in_channels: usize,
    units: Vec<Msfm>,
    project: ConvBnAct,
}

impl MatchNeck {
    pub fn new(
        p: &Path,
        in_channels: usize,
        out_channels: usize,
        depth: usize,
        unit: MsfmConfig,
    ) -> Result<Self> {
        if !in_channels.is_multiple_of(2) {
            return Err(Error::ConfigMismatch(format!(
                "{}: MatchNeck needs an even channel count, got {in_channels}",
                p.name()
            )));
        }
        let half = in_channels / 2;
        let cfg = MsfmConfig {
            channels: half,
            ..unit
        };
        let units = (0..depth)
            .map(|i| Msfm::new(&p.pp(format!("msfm{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        let project = ConvBnAct::new(&p.pp("project"), ConvSpec::new(in_channels, out_channels, 1))?;
        Ok(Self {
            name: p.name().to_string(),
            in_channels,
            units,
            project,
        })
    }

    pub fn units(&self) -> &[Msfm] {
        &self.units
    }

    pub fn project(&self) -> &ConvBnAct {
        &self.project
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels {
            return Err(Error::ConfigMismatch(format!(
                "{}: expected {} channels, got {c}",
                self.name, self.in_channels
            )));
        }
        let half = c / 2;
        let kept = x.narrow(1, 0, half)?;
        let mut branch = x.narrow(1, half, half)?.contiguous()?;
        for unit in &self.units {
            branch = unit.forward(&branch, ctx)?;
        }
        self.project.forward(&Tensor::cat(&[&kept, &branch], 1)?, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn pools_on_2x2() {
        let x = Tensor::from_vec(vec![1f64, 2., 3., 4.], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let d = directional_pools(&x).unwrap();
        assert_eq!(d.height.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.5, 3.5]);
        assert_eq!(d.width.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![2., 3.]);
        assert_eq!(d.channel.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![2.5]);
    }

    #[test]
    fn split_inverts_concat() {
        let h = Tensor::randn(0f64, 1., (2, 3, 20, 1), &Device::Cpu).unwrap();
        let w = Tensor::randn(0f64, 1., (2, 3, 1, 12), &Device::Cpu).unwrap();
        let s = concat_spatial(&h, &w).unwrap();
        assert_eq!(s.dims(), &[2, 3, 32, 1]);
        let (h2, w2) = split_spatial(&s, 20).unwrap();
        assert_eq!(h2.dims(), &[2, 3, 20, 1]);
        assert_eq!(w2.dims(), &[2, 3, 1, 12]);
        let dh = (h2 - &h).unwrap().abs().unwrap().max_all().unwrap();
        let dw = (w2 - &w).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(dh.to_scalar::<f64>().unwrap(), 0.0);
        assert_eq!(dw.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn channel_match_with_half_gate() {
        let c = Tensor::from_vec(vec![2f64, -4.], (1, 2, 1, 1), &Device::Cpu).unwrap();
        let gate = Tensor::full(0.5f64, (1, 2, 7, 1), &Device::Cpu).unwrap();
        let out = channel_match(&c, &gate).unwrap();
        assert_eq!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1., -2.]);
    }

    #[test]
    fn odd_channels_rejected_by_match_neck() {
        let store = ParamStore::new(0, DType::F32);
        let err = MatchNeck::new(&store.root(), 7, 8, 1, MsfmConfig::new(8, true)).unwrap_err();
        assert_eq!(err.kind(), "config-mismatch");
    }

    #[test]
    fn reduction_invariant() {
        let mut cfg = MsfmConfig::new(8, false);
        cfg.reduction = 4;
        assert!(cfg.validate().is_err());
        cfg.reduction = 2;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn shape_preserved() {
        let store = ParamStore::new(0, DType::F32);
        let m = Msfm::new(&store.root(), MsfmConfig::new(8, true)).unwrap();
        let x = Tensor::randn(0f32, 1., (2, 8, 20, 12), &Device::Cpu).unwrap();
        assert_eq!(m.forward(&x, &Ctx::train()).unwrap().dims(), x.dims());
    }
}
