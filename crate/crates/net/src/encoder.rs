//! Convolutional encoders producing 1/8-resolution feature maps.

use candle_core::Tensor;

use crate::config::Activation;
use crate::layers::{activate, instance_norm, Conv2d};
use crate::params::ParamStore;
use crate::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Instance,
    None,
}

fn norm(x: Tensor, n: Norm) -> Result<Tensor, NetError> {
    match n {
        Norm::Instance => instance_norm(&x),
        Norm::None => Ok(x),
    }
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    downsample: Option<Conv2d>,
    norm: Norm,
    act: Activation,
}

impl ResBlock {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        norm: Norm,
        act: Activation,
    ) -> Result<Self, NetError> {
        let downsample = if stride != 1 || c_in != c_out {
            Some(Conv2d::new(ps, &format!("{name}.downsample"), c_in, c_out, 1, stride)?)
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), c_in, c_out, 3, stride)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), c_out, c_out, 3, 1)?,
            downsample,
            norm,
            act,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor, NetError> {
        let y = activate(&norm(self.conv1.forward(x)?, self.norm)?, self.act)?;
        let y = activate(&norm(self.conv2.forward(&y)?, self.norm)?, self.act)?;
        let skip = match &self.downsample {
            Some(d) => norm(d.forward(x)?, self.norm)?,
            None => x.clone(),
        };
        activate(&(skip + y)?, self.act)
    }
}

/// Stride-2 stem followed by three residual stages (strides 1, 2, 2) and a
/// 1x1 projection: an `[B, 3, H, W]` image becomes `[B, out, H/8, W/8]`.
pub struct Encoder {
    conv1: Conv2d,
    layers: [ResBlock; 3],
    conv2: Conv2d,
    norm: Norm,
    act: Activation,
}

impl Encoder {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        out: usize,
        norm: Norm,
        act: Activation,
    ) -> Result<Self, NetError> {
        let [d1, d2, d3] = dims;
        Ok(Self {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), 3, d1, 7, 2)?,
            layers: [
                ResBlock::new(ps, &format!("{name}.layer1"), d1, d1, 1, norm, act)?,
                ResBlock::new(ps, &format!("{name}.layer2"), d1, d2, 2, norm, act)?,
                ResBlock::new(ps, &format!("{name}.layer3"), d2, d3, 2, norm, act)?,
            ],
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), d3, out, 1, 1)?,
            norm,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NetError> {
        let mut y = activate(&norm(self.conv1.forward(x)?, self.norm)?, self.act)?;
        for layer in &self.layers {
            y = layer.forward(&y)?;
        }
        self.conv2.forward(&y)
    }
}
