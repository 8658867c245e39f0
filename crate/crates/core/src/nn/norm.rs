//! Fused training-mode batch normalisation: one pass for statistics, one for
//! the output, and a closed-form backward.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp3, Layout, Result, Shape, Tensor, WithDType};

/// Per-channel batch mean and biased variance of a contiguous (b, c, h, w) tensor.
pub fn channel_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let data = x.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    let n = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += data[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter().sum::<f64>();
        }
        let m = s / n;
        let mut v = 0.0;
        for bi in 0..b {
            v += data[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]
                .iter()
                .map(|x| (x - m) * (x - m))
                .sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = v / n;
    }
    Ok((mean, var))
}

/// `gamma · (x − mean) / sqrt(var + eps) + beta` with batch statistics.
pub(crate) struct BatchNormTrain {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((s, e)) => Ok(&data[s..e]),
        None => candle_core::bail!("batch norm expects contiguous inputs"),
    }
}

impl BatchNormTrain {
    fn run<T: WithDType>(&self, x: &[T], gamma: &[T], beta: &[T], dims: (usize, usize, usize)) -> Vec<T> {
        let (b, c, hw) = dims;
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let scale = gamma[ci].to_f64() * self.inv_std[ci];
                let shift = beta[ci].to_f64() - self.mean[ci] * scale;
                let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                for (o, v) in out[r.clone()].iter_mut().zip(&x[r]) {
                    *o = T::from_f64(v.to_f64() * scale + shift);
                }
            }
        }
        out
    }
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let dims = (b, c, h * w);
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(be)) => {
                CpuStorage::F32(self.run(slice(x, l1)?, slice(g, l2)?, slice(be, l3)?, dims))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(be)) => {
                CpuStorage::F64(self.run(slice(x, l1)?, slice(g, l2)?, slice(be, l3)?, dims))
            }
            _ => candle_core::bail!("batch norm: unsupported dtype {:?}", s1.dtype()),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let hw = h * w;
        let n = (b * hw) as f64;
        let f64s = |t: &Tensor| -> Result<Vec<f64>> {
            t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()
        };
        let xs = f64s(x)?;
        let gs = f64s(grad)?;
        let gamma = f64s(gamma)?;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                let (m, is) = (self.mean[ci], self.inv_std[ci]);
                for (xv, gv) in xs[r.clone()].iter().zip(&gs[r]) {
                    dbeta[ci] += gv;
                    dgamma[ci] += gv * (xv - m) * is;
                }
            }
        }
        let mut dx = vec![0.0; xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                let (m, is) = (self.mean[ci], self.inv_std[ci]);
                let k = gamma[ci] * is / n;
                for ((d, xv), gv) in dx[r.clone()].iter_mut().zip(&xs[r.clone()]).zip(&gs[r]) {
                    let xhat = (xv - m) * is;
                    *d = k * (n * gv - dbeta[ci] - xhat * dgamma[ci]);
                }
            }
        }
        let dt = x.dtype();
        let dev = x.device();
        Ok((
            Some(Tensor::from_vec(dx, (b, c, h, w), dev)?.to_dtype(dt)?),
            Some(Tensor::from_vec(dgamma, c, dev)?.to_dtype(dt)?),
            Some(Tensor::from_vec(dbeta, c, dev)?.to_dtype(dt)?),
        ))
    }
}
