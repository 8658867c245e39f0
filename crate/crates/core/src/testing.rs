//! Finite-difference gradient checking for f64 graphs.

use candle_core::{DType, Tensor, Var};

use crate::error::Result;

/// Norm-wise relative error between analytic and central-difference
/// gradients of the scalar `f` with respect to each of `inputs`.
///
/// Returns one error per input: `‖g_a − g_n‖ / max(‖g_a‖, ‖g_n‖, 1e-12)`.
pub fn gradcheck<F>(f: F, inputs: &[Var], step: f64) -> Result<Vec<f64>>
where
    F: Fn() -> Result<Tensor>,
{
    let y = f()?;
    let grads = y.backward()?;
    let mut out = Vec::with_capacity(inputs.len());
    for var in inputs {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; var.elem_count()],
        };
        let shape = var.shape().clone();
        let base = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let mut numeric = vec![0.0; base.len()];
        let mut probe = base.clone();
        for i in 0..base.len() {
            probe[i] = base[i] + step;
            var.set(&Tensor::from_slice(&probe, &shape, var.device())?.to_dtype(var.dtype())?)?;
            let plus = f()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            probe[i] = base[i] - step;
            var.set(&Tensor::from_slice(&probe, &shape, var.device())?.to_dtype(var.dtype())?)?;
            let minus = f()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            probe[i] = base[i];
            numeric[i] = (plus - minus) / (2.0 * step);
        }
        var.set(&Tensor::from_slice(&base, &shape, var.device())?.to_dtype(var.dtype())?)?;
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let denom = norm(&analytic).max(norm(&numeric)).max(1e-12);
        out.push(norm(&diff) / denom);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn exact_for_a_polynomial() {
        let x = Var::from_tensor(&Tensor::new(&[0.3f64, -1.2, 2.0], &Device::Cpu).unwrap()).unwrap();
        let errs = gradcheck(|| Ok((x.as_tensor().powf(3.0)? * 0.5)?.sum_all()?), std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(errs[0] < 1e-8, "{errs:?}");
    }
}
