//! Building blocks shared by every network stage: parameter storage, forward
//! context, convolution, batch normalisation.

mod norm;
mod store;
mod unfold;

use std::cell::RefCell;

use candle_core::{Tensor, Var, D};

pub use store::{Init, ParamEntry, ParamKind, ParamStore, Path};
pub use norm::channel_stats;
pub use unfold::{fold, unfold, Window};

use crate::error::{Error, Result};

/// Per-call forward context: train/eval switch plus optional instrumentation.
#[derive(Clone, Copy, Default)]
pub struct Ctx<'a> {
    pub train: bool,
    profiler: Option<&'a Profiler>,
    tap: Option<&'a Tap>,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train() -> Self {
        Self {
            train: true,
            ..Self::default()
        }
    }

    pub fn with_profiler(mut self, profiler: &'a Profiler) -> Self {
        self.profiler = Some(profiler);
        self
    }

    pub fn with_tap(mut self, tap: &'a Tap) -> Self {
        self.tap = Some(tap);
        self
    }

    /// Records multiply-accumulates for one batch item.
    pub fn record(&self, module: &str, macs: u64) {
        if let Some(p) = self.profiler {
            p.rows.borrow_mut().push((module.to_string(), macs));
        }
    }

    /// Named activation hook; returns the (possibly replaced) activation.
    pub fn tap(&self, layer: &str, x: Tensor) -> Result<Tensor> {
        match self.tap {
            Some(t) => t.visit(layer, x),
            None => Ok(x),
        }
    }
}

/// Accumulates per-module multiply-accumulate counts during a forward pass.
#[derive(Default)]
pub struct Profiler {
    rows: RefCell<Vec<(String, u64)>>,
}

impl Profiler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> Vec<(String, u64)> {
        self.rows.borrow().clone()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.borrow().iter().map(|(_, m)| m).sum()
    }
}

/// Replaces one named activation with a fresh leaf variable so gradients with
/// respect to it can be read back after `backward`.
pub struct Tap {
    layer: String,
    captured: RefCell<Option<Var>>,
    seen: RefCell<Vec<String>>,
}

impl Tap {
    pub fn new(layer: impl Into<String>) -> Self {
        Self {
            layer: layer.into(),
            captured: RefCell::new(None),
            seen: RefCell::new(Vec::new()),
        }
    }

    fn visit(&self, layer: &str, x: Tensor) -> Result<Tensor> {
        self.seen.borrow_mut().push(layer.to_string());
        if layer == self.layer {
            let var = Var::from_tensor(&x.detach())?;
            let out = var.as_tensor().clone();
            *self.captured.borrow_mut() = Some(var);
            Ok(out)
        } else {
            Ok(x)
        }
    }

    pub fn captured(&self) -> Option<Var> {
        self.captured.borrow().clone()
    }

    pub fn seen(&self) -> Vec<String> {
        self.seen.borrow().clone()
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Numerically stable softmax along `dim`.
pub fn softmax<Dm: candle_core::shape::Dim>(x: &Tensor, dim: Dm) -> Result<Tensor> {
    let dim = dim.to_index(x.shape(), "softmax")?;
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Plain 2-D convolution with square kernels, optional grouping and bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    name: String,
    weight: Var,
    bias: Option<Var>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            groups: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn param_count(&self) -> usize {
        self.in_channels / self.groups * self.out_channels * self.kernel * self.kernel
            + if self.bias { self.out_channels } else { 0 }
    }
}

impl Conv2d {
    pub fn new(p: &Path, spec: ConvSpec) -> Result<Self> {
        let ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            groups,
            bias,
        } = spec;
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "{}: channels {in_channels}->{out_channels} not divisible by {groups} groups",
                p.name()
            )));
        }
        if kernel % 2 == 0 || stride == 0 {
            return Err(Error::InvalidConfig(format!(
                "{}: kernel {kernel} must be odd and stride {stride} positive",
                p.name()
            )));
        }
        let fan_in = in_channels / groups * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = p.weight(
            "weight",
            &[out_channels, in_channels / groups, kernel, kernel],
            Init::Uniform(bound),
        )?;
        let bias = if bias {
            Some(p.bias("bias", &[out_channels], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            name: p.name().to_string(),
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
            groups,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias_var(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, cin, h, w) = x.dims4()?;
        if cin != self.in_channels {
            return Err(Error::ConfigMismatch(format!(
                "{}: expected {} input channels, got {cin}",
                self.name, self.in_channels
            )));
        }
        let win = Window::new(self.kernel, self.stride, self.pad);
        let (oh, ow) = (win.out_dim(h), win.out_dim(w));
        let l = oh * ow;
        let cols = if self.kernel == 1 && self.stride == 1 {
            x.reshape((b, cin, l))?
        } else {
            unfold(x, win)?
        };
        let (g, cout) = (self.groups, self.out_channels);
        let kdim = cin / g * self.kernel * self.kernel;
        let y = if g == 1 {
            self.weight
                .reshape((cout, kdim))?
                .broadcast_matmul(&cols)?
        } else {
            let cols = cols.reshape((b, g, kdim, l))?;
            self.weight
                .reshape((g, cout / g, kdim))?
                .broadcast_matmul(&cols)?
        };
        let mut y = y.reshape((b, cout, oh, ow))?;
        if let Some(bias) = &self.bias {
            y = y.broadcast_add(&bias.reshape((1, cout, 1, 1))?)?;
        }
        ctx.record(&self.name, (cout * kdim * l) as u64);
        Ok(y)
    }
}

/// Batch normalisation over (b, h, w) per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(p: &Path, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: p.bias("weight", &[channels], Init::Const(1.0))?,
            bias: p.bias("bias", &[channels], Init::Const(0.0))?,
            running_mean: p.buffer("running_mean", &[channels], Init::Const(0.0))?,
            running_var: p.buffer("running_var", &[channels], Init::Const(1.0))?,
            eps: 1e-3,
            momentum: 0.03,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let c = x.dim(1)?;
        let shape = (1, c, 1, 1);
        if ctx.train {
            let x = x.contiguous()?;
            let (mean, var) = channel_stats(&x)?;
            let n = (x.elem_count() / c) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let dev = x.device();
            let dt = x.dtype();
            let batch_mean = Tensor::from_slice(&mean, c, dev)?.to_dtype(dt)?;
            let batch_var = Tensor::from_slice(&var, c, dev)?.to_dtype(dt)?;
            let new_mean = ((self.running_mean.as_tensor().detach() * (1.0 - m))? + (batch_mean * m)?)?;
            let new_var =
                ((self.running_var.as_tensor().detach() * (1.0 - m))? + (batch_var * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            let op = norm::BatchNormTrain {
                inv_std: var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect(),
                mean,
            };
            return Ok(x.apply_op3(self.weight.as_tensor(), self.bias.as_tensor(), op)?);
        }
        let inv = (self.running_var.reshape(shape)? + self.eps)?.sqrt()?.recip()?;
        let scale = self.weight.reshape(shape)?.broadcast_mul(&inv)?;
        let y = x
            .broadcast_sub(&self.running_mean.reshape(shape)?)?
            .broadcast_mul(&scale)?;
        Ok(y.broadcast_add(&self.bias.reshape(shape)?)?)
    }
}

/// Convolution → batch norm → SiLU.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: bool,
}

impl ConvBnAct {
    pub fn new(p: &Path, spec: ConvSpec) -> Result<Self> {
        let conv = Conv2d::new(p, spec.bias(false))?;
        let bn = BatchNorm2d::new(&p.pp("bn"), spec.out_channels)?;
        Ok(Self {
            conv,
            bn,
            act: true,
        })
    }

    pub fn linear(mut self) -> Self {
        self.act = false;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.bn.forward(&self.conv.forward(x, ctx)?, ctx)?;
        if self.act {
            Ok(y.silu()?)
        } else {
            Ok(y)
        }
    }
}
