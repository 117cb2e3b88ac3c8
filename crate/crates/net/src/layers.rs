//! Minimal differentiable building blocks on top of candle tensors.

use candle_core::{Tensor, D};

use crate::config::Activation;
use crate::params::ParamStore;
use crate::NetError;

pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Square kernel, "same"-style padding `k / 2`, PyTorch-default uniform init.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self, NetError> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = ps.uniform(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], bound)?;
        let bias = ps.uniform(&format!("{name}.bias"), &[c_out], bound)?;
        Ok(Self { weight, bias, stride, padding: kernel / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NetError> {
        conv2d_im2col(x, &self.weight, Some(&self.bias), self.padding, self.stride)
    }
}

/// Convolution as patch extraction plus a single 2-D matmul, laid out
/// channels-first so every backward reduction is contiguous. Much cheaper to
/// differentiate on the CPU than the stock convolution kernels.
pub fn conv2d_im2col(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    padding: usize,
    stride: usize,
) -> Result<Tensor, NetError> {
    let (b, c, h, w) = x.dims4()?;
    let (o, _, k, _) = weight.dims4()?;
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let cols = if k == 1 && stride == 1 && padding == 0 {
        x.transpose(0, 1)?.contiguous()?.reshape((c, b * h * w))?
    } else {
        crate::ops::im2col(x, k, stride, padding)?
    };
    let mut y = weight.reshape((o, c * k * k))?.matmul(&cols)?;
    if let Some(bias) = bias {
        y = y.broadcast_add(&bias.reshape((o, 1))?)?;
    }
    Ok(y.reshape((o, b, ho, wo))?.transpose(0, 1)?.contiguous()?)
}

pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self, NetError> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = ps.uniform(&format!("{name}.weight"), &[d_out, d_in], bound)?;
        let bias = ps.uniform(&format!("{name}.bias"), &[d_out], bound)?;
        Ok(Self { weight, bias })
    }

    /// `x`: `[batch, d_in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NetError> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub fn activate(x: &Tensor, act: Activation) -> Result<Tensor, NetError> {
    Ok(match act {
        Activation::Relu => x.relu()?,
        Activation::Silu => x.silu()?,
    })
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor, NetError> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Per-sample, per-channel normalization over the spatial dims, no affine.
pub fn instance_norm(x: &Tensor) -> Result<Tensor, NetError> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let out = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(out.reshape((b, c, h, w))?)
}

/// Numerically shifted softmax; every op has a backward pass.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor, NetError> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&s)?)
}
