//! Differentiable primitives composed from core tensor ops so every one of
//! them has a backward pass in both precisions.

use candle_core::{Tensor, D};

use crate::error::{CfbtError, Result};

pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(weight)?.broadcast_add(bias)?)
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Logistic function; logits are clamped to +-30 before exponentiation.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    let x = x.clamp(-30.0, 30.0)?;
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `x @ w^T + b` over the last dimension, PyTorch weight layout `(out, in)`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (out_dim, in_dim) = weight.dims2()?;
    let last = *dims.last().ok_or_else(|| CfbtError::Shape("linear on a scalar".into()))?;
    if last != in_dim {
        return Err(CfbtError::Shape(format!(
            "linear expects width {in_dim}, got {last}"
        )));
    }
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let flat = x.reshape((rows, in_dim))?;
    let mut y = flat.matmul(&weight.t()?)?;
    if let Some(b) = bias {
        y = y.broadcast_add(b)?;
    }
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = out_dim;
    Ok(y.reshape(out_dims)?)
}

/// Fails with a numeric error if any element is NaN or infinite.
pub fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    let s = x.detach().abs()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(CfbtError::Numeric(format!("non-finite values in {what}")))
    }
}
