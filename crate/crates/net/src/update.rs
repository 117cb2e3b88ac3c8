//! Recurrent denoising decoder: motion encoder, embedding enhancement,
//! convolutional GRU, flow and mask heads, convex upsampling.

use candle_core::Tensor;

use crate::config::{Activation, Fusion, ModelConfig};
use crate::layers::{activate, sigmoid, softmax, Conv2d, Linear};
use crate::params::ParamStore;
use crate::NetError;

/// Encodes correlation taps and the current coarse flow into motion features.
pub struct MotionEncoder {
    convc1: Conv2d,
    convc2: Conv2d,
    convf1: Conv2d,
    convf2: Conv2d,
    conv: Conv2d,
    act: Activation,
}

impl MotionEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self, NetError> {
        let h = cfg.hidden_dim;
        let (c1, c2, f1, f2) = (2 * h, 3 * h / 2, h, h / 2);
        Ok(Self {
            convc1: Conv2d::new(ps, &format!("{name}.convc1"), cfg.corr_channels(), c1, 1, 1)?,
            convc2: Conv2d::new(ps, &format!("{name}.convc2"), c1, c2, 3, 1)?,
            convf1: Conv2d::new(ps, &format!("{name}.convf1"), 2, f1, 7, 1)?,
            convf2: Conv2d::new(ps, &format!("{name}.convf2"), f1, f2, 3, 1)?,
            conv: Conv2d::new(ps, &format!("{name}.conv"), c2 + f2, cfg.motion_dim() - 2, 3, 1)?,
            act: cfg.activation,
        })
    }

    pub fn forward(&self, flow: &Tensor, corr: &Tensor) -> Result<Tensor, NetError> {
        let a = self.act;
        let c = activate(&self.convc2.forward(&activate(&self.convc1.forward(corr)?, a)?)?, a)?;
        let f = activate(&self.convf2.forward(&activate(&self.convf1.forward(flow)?, a)?)?, a)?;
        let m = activate(&self.conv.forward(&Tensor::cat(&[c, f], 1)?)?, a)?;
        Ok(Tensor::cat(&[&m, flow], 1)?)
    }
}

/// Sinusoidal code of integer time steps: `[B, dim]` (sines then cosines).
pub fn timestep_code(t: &[usize], dim: usize, like: &Tensor) -> Result<Tensor, NetError> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * step as f64);
        let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|a| (a.sin(), a.cos())).unzip();
        data.extend(s);
        data.extend(c);
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), like.device())?.to_dtype(like.dtype())?)
}

/// EE block: fuses motion features with the context and injects the time step.
pub struct EmbedEnhance {
    time1: Linear,
    time2: Linear,
    fuse: Conv2d,
    fusion: Fusion,
    time_dim: usize,
    act: Activation,
}

impl EmbedEnhance {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self, NetError> {
        let te = cfg.time_embed_dim;
        let out = cfg.embed_dim();
        let (time_out, fuse_in) = match cfg.fusion {
            Fusion::Add => (out, cfg.motion_dim() + cfg.context_dim),
            Fusion::Concat => (te, cfg.motion_dim() + cfg.context_dim + te),
        };
        Ok(Self {
            time1: Linear::new(ps, &format!("{name}.time_mlp.0"), te, te)?,
            time2: Linear::new(ps, &format!("{name}.time_mlp.2"), te, time_out)?,
            fuse: Conv2d::new(ps, &format!("{name}.fuse"), fuse_in, out, 3, 1)?,
            fusion: cfg.fusion,
            time_dim: te,
            act: cfg.activation,
        })
    }

    /// `x_o = EE(t, motion(v_t, x_cv), x_c)` at the coarse grid.
    pub fn forward(&self, t: &[usize], motion: &Tensor, context: &Tensor) -> Result<Tensor, NetError> {
        let (b, _, h, w) = motion.dims4()?;
        let code = timestep_code(t, self.time_dim, motion)?;
        let temb = self.time2.forward(&self.time1.forward(&code)?.silu()?)?;
        let c = temb.dim(1)?;
        let temb = temb.reshape((b, c, 1, 1))?;
        let x = match self.fusion {
            Fusion::Add => self.fuse.forward(&Tensor::cat(&[motion, context], 1)?)?.broadcast_add(&temb)?,
            Fusion::Concat => {
                let tmap = temb.broadcast_as((b, c, h, w))?.contiguous()?;
                self.fuse.forward(&Tensor::cat(&[motion, context, &tmap], 1)?)?
            }
        };
        activate(&x, self.act)
    }
}

pub struct ConvGru {
    convz: Conv2d,
    convr: Conv2d,
    convq: Conv2d,
}

impl ConvGru {
    pub fn new(ps: &mut ParamStore, name: &str, hidden: usize, input: usize) -> Result<Self, NetError> {
        Ok(Self {
            convz: Conv2d::new(ps, &format!("{name}.convz"), hidden + input, hidden, 3, 1)?,
            convr: Conv2d::new(ps, &format!("{name}.convr"), hidden + input, hidden, 3, 1)?,
            convq: Conv2d::new(ps, &format!("{name}.convq"), hidden + input, hidden, 3, 1)?,
        })
    }

    pub fn forward(&self, h: &Tensor, x: &Tensor) -> Result<Tensor, NetError> {
        let hx = Tensor::cat(&[h, x], 1)?;
        let z = sigmoid(&self.convz.forward(&hx)?)?;
        let r = sigmoid(&self.convr.forward(&hx)?)?;
        let q = self.convq.forward(&Tensor::cat(&[&(&r * h)?, x], 1)?)?.tanh()?;
        Ok(((1.0 - &z)?.mul(h)? + z.mul(&q)?)?)
    }
}

/// Two-layer conv head.
pub struct Head {
    conv1: Conv2d,
    conv2: Conv2d,
    act: Activation,
    scale: f64,
}

impl Head {
    pub fn new(
        ps: &mut ParamStore,
        names: (&str, &str),
        c_in: usize,
        mid: usize,
        out: usize,
        k2: usize,
        act: Activation,
        scale: f64,
    ) -> Result<Self, NetError> {
        Ok(Self {
            conv1: Conv2d::new(ps, names.0, c_in, mid, 3, 1)?,
            conv2: Conv2d::new(ps, names.1, mid, out, k2, 1)?,
            act,
            scale,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NetError> {
        let y = self.conv2.forward(&activate(&self.conv1.forward(x)?, self.act)?)?;
        Ok(if self.scale == 1.0 { y } else { (y * self.scale)? })
    }
}

/// Softmax-normalized `[B, 1, 9, 8, 8, h, w]` weights from raw mask logits.
pub fn convex_weights(mask: &Tensor) -> Result<Tensor, NetError> {
    let (b, _, h, w) = mask.dims4()?;
    softmax(&mask.reshape(vec![b, 1, 9, 8, 8, h, w])?, 2)
}

/// Full-resolution flow as convex combinations of the 3x3 coarse
/// neighbourhood: `[B, 2, h, w]` coarse pixels → `[B, 2, 8h, 8w]` pixels.
pub fn convex_upsample(flow: &Tensor, mask: &Tensor) -> Result<Tensor, NetError> {
    let (b, c, h, w) = flow.dims4()?;
    let weights = convex_weights(mask)?;
    let scaled = (flow * 8.0)?;
    let padded = scaled.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let mut taps = Vec::with_capacity(9);
    for dy in 0..3 {
        for dx in 0..3 {
            taps.push(padded.narrow(2, dy, h)?.narrow(3, dx, w)?);
        }
    }
    let unfolded = Tensor::stack(&taps, 2)?.reshape(vec![b, c, 9, 1, 1, h, w])?;
    let up = weights.broadcast_mul(&unfolded)?.sum(2)?;
    Ok(up.permute((0, 1, 4, 2, 5, 3))?.reshape((b, c, 8 * h, 8 * w))?)
}

/// Sum of the convex weights behind each output pixel: `[B, 1, 8, 8, h, w]`.
pub fn convex_weight_sums(mask: &Tensor) -> Result<Tensor, NetError> {
    Ok(convex_weights(mask)?.sum(2)?)
}
