//! Patch extraction (im2col) and its adjoint (col2im) as differentiable ops.
//!
//! Convolutions in this crate are expressed as `unfold` followed by a batched
//! matrix product, so both forward and backward reduce to GEMMs plus these two
//! gather/scatter kernels.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Result, Shape, Tensor, WithDType};

/// Geometry of a square sliding window over a (b, c, h, w) input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_dim(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

struct Im2Col {
    win: Window,
}

struct Col2Im {
    win: Window,
    channels: usize,
    height: usize,
    width: usize,
}

fn im2col_kernel<T: WithDType>(
    src: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    win: Window,
) -> Vec<T> {
    let k = win.kernel;
    let (oh, ow) = (win.out_dim(h), win.out_dim(w));
    let l = oh * ow;
    let rows = c * k * k;
    let mut dst = vec![T::zero(); b * rows * l];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &src[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let out = &mut dst[(bi * rows + row) * l..(bi * rows + row + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out[oy * ow..(oy + 1) * ow];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn col2im_kernel<T: WithDType>(
    src: &[T],
    b: usize,
    (c, h, w): (usize, usize, usize),
    win: Window,
) -> Vec<T> {
    let k = win.kernel;
    let (oh, ow) = (win.out_dim(h), win.out_dim(w));
    let l = oh * ow;
    let rows = c * k * k;
    let mut dst = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &mut dst[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let col = &src[(bi * rows + row) * l..(bi * rows + row + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += col[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("unfold expects a contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (b, c, h, w) = dims;
        if h + 2 * self.win.pad < self.win.kernel || w + 2 * self.win.pad < self.win.kernel {
            candle_core::bail!("unfold window larger than padded input {h}x{w}");
        }
        let k = self.win.kernel;
        let l = self.win.out_dim(h) * self.win.out_dim(w);
        let shape = Shape::from((b, c * k * k, l));
        let out = match storage {
            CpuStorage::F32(d) => {
                CpuStorage::F32(im2col_kernel(contiguous_slice(d, layout)?, dims, self.win))
            }
            CpuStorage::F64(d) => {
                CpuStorage::F64(im2col_kernel(contiguous_slice(d, layout)?, dims, self.win))
            }
            other => candle_core::bail!("unfold: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let (_, c, h, w) = arg.dims4()?;
        let op = Col2Im {
            win: self.win,
            channels: c,
            height: h,
            width: w,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, _, _) = layout.shape().dims3()?;
        let chw = (self.channels, self.height, self.width);
        let shape = Shape::from((b, self.channels, self.height, self.width));
        let out = match storage {
            CpuStorage::F32(d) => {
                CpuStorage::F32(col2im_kernel(contiguous_slice(d, layout)?, b, chw, self.win))
            }
            CpuStorage::F64(d) => {
                CpuStorage::F64(col2im_kernel(contiguous_slice(d, layout)?, b, chw, self.win))
            }
            other => candle_core::bail!("fold: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(unfold(grad_res, self.win)?))
    }
}

/// Extracts sliding k×k patches: (b, c, h, w) → (b, c·k², oh·ow).
///
/// Row index is `(c·k + ky)·k + kx`; out-of-bounds taps read zero.
pub fn unfold(x: &Tensor, win: Window) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Im2Col { win })
}

/// Adjoint of [`unfold`]: scatters-and-adds patches back to (b, c, h, w).
pub fn fold(cols: &Tensor, win: Window, chw: (usize, usize, usize)) -> Result<Tensor> {
    let (channels, height, width) = chw;
    cols.contiguous()?.apply_op1(Col2Im {
        win,
        channels,
        height,
        width,
    })
}
