//! The conditional recurrent denoising flow network.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use pivdiff_core::diffusion::FlowNormalizer;
use pivdiff_core::{Frame, VelocityField};

use crate::config::ModelConfig;
use crate::corr::{coords_grid, CorrPyramid};
use crate::encoder::{Encoder, Norm};
use crate::estimate::FlowModel;
use crate::params::ParamStore;
use crate::update::{convex_upsample, ConvGru, EmbedEnhance, Head, MotionEncoder};
use crate::NetError;

/// Encoder products for one batch of image pairs (`x_c`, `x_cv`, `x_h`).
pub struct Conditions {
    pub corr: CorrPyramid,
    pub context: Tensor,
    pub hidden: Tensor,
    initial_hidden: Tensor,
}

pub struct DiffuserNet {
    cfg: ModelConfig,
    normalizer: FlowNormalizer,
    params: ParamStore,
    fnet: Encoder,
    cnet: Encoder,
    motion: MotionEncoder,
    ee: EmbedEnhance,
    gru: ConvGru,
    flow_head: Head,
    mask_head: Head,
}

impl DiffuserNet {
    pub fn new(cfg: ModelConfig, normalizer: FlowNormalizer, seed: u64, dtype: DType) -> Result<Self, NetError> {
        cfg.validate()?;
        let mut ps = ParamStore::new(seed, dtype);
        let act = cfg.activation;
        let fnet = Encoder::new(&mut ps, "fnet", cfg.encoder_dims(cfg.feature_dim), cfg.feature_dim, Norm::Instance, act)?;
        let c_out = cfg.hidden_dim + cfg.context_dim;
        let cnet = Encoder::new(&mut ps, "cnet", cfg.encoder_dims(c_out), c_out, Norm::None, act)?;
        let motion = MotionEncoder::new(&mut ps, "update_block.encoder", &cfg)?;
        let ee = EmbedEnhance::new(&mut ps, "update_block.ee", &cfg)?;
        let gru = ConvGru::new(&mut ps, "update_block.gru", cfg.hidden_dim, cfg.embed_dim())?;
        let h = cfg.hidden_dim;
        let flow_head = Head::new(
            &mut ps,
            ("update_block.flow_head.conv1", "update_block.flow_head.conv2"),
            h + cfg.embed_dim(),
            2 * h,
            2,
            3,
            act,
            1.0,
        )?;
        let mask_head =
            Head::new(&mut ps, ("update_block.mask.0", "update_block.mask.2"), h, 2 * h, 64 * 9, 1, act, 0.25)?;
        Ok(Self { cfg, normalizer, params: ps, fnet, cnet, motion, ee, gru, flow_head, mask_head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn flow_normalizer(&self) -> FlowNormalizer {
        self.normalizer
    }

    /// Dual encoders and correlation pyramid for `[B, 1, H, W]` frames in `[0, 1]`.
    pub fn encode_batch(&self, frame_a: &Tensor, frame_b: &Tensor) -> Result<Conditions, NetError> {
        let (b, _, h, w) = frame_a.dims4()?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(NetError::DimensionNotDivisible { height: h, width: w });
        }
        let side = self.cfg.min_coarse_side();
        if h / 8 < side || w / 8 < side {
            return Err(NetError::ShapeMismatch(format!(
                "{h}x{w} input too small for {} pyramid levels (need {} px per side)",
                self.cfg.pyramid_levels,
                8 * side
            )));
        }
        // grayscale replicated to three channels, then mapped to [-1, 1]
        let rgb = |x: &Tensor| -> Result<Tensor, NetError> {
            let x = x.to_dtype(self.dtype())?;
            Ok(Tensor::cat(&[&x, &x, &x], 1)?.affine(2.0, -1.0)?)
        };
        let (a, bb) = (rgb(frame_a)?, rgb(frame_b)?);
        let feats = self.fnet.forward(&Tensor::cat(&[&a, &bb], 0)?)?;
        let corr = CorrPyramid::new(&feats.narrow(0, 0, b)?, &feats.narrow(0, b, b)?, self.cfg.pyramid_levels)?;
        let ctx = self.cnet.forward(&a)?;
        let hidden = ctx.narrow(1, 0, self.cfg.hidden_dim)?.tanh()?;
        let context = crate::layers::activate(&ctx.narrow(1, self.cfg.hidden_dim, self.cfg.context_dim)?, self.cfg.activation)?;
        Ok(Conditions { corr, context, initial_hidden: hidden.clone(), hidden })
    }

    /// One conditional denoising step on a batch: `v_t` is `[B, 2, H, W]`
    /// normalized flow, the result is the predicted normalized `v0`.
    pub fn denoise_batch(&self, cond: &mut Conditions, v_t: &Tensor, t: &[usize]) -> Result<Tensor, NetError> {
        let (b, c, h, w) = v_t.dims4()?;
        let (_, _, hc, wc) = cond.context.dims4()?;
        if c != 2 || (h, w) != (8 * hc, 8 * wc) || b != t.len() {
            return Err(NetError::ShapeMismatch(format!(
                "v_t {:?} with {} time steps for a {}x{} coarse grid",
                v_t.dims(),
                t.len(),
                hc,
                wc
            )));
        }
        let pixels = (v_t.to_dtype(self.dtype())? * self.normalizer.scale_max)?;
        let mut flow = (pixels.avg_pool2d(8)? / 8.0)?;
        let grid = coords_grid(b, hc, wc, &flow)?;
        let mut hidden = if self.cfg.reset_hidden_per_step { cond.initial_hidden.clone() } else { cond.hidden.clone() };
        for _ in 0..self.cfg.inner_iterations {
            let taps = cond.corr.lookup(&(&grid + &flow)?, self.cfg.lookup_radius)?;
            let motion = self.motion.forward(&flow, &taps)?;
            let x_o = self.ee.forward(t, &motion, &cond.context)?;
            hidden = self.gru.forward(&hidden, &x_o)?;
            let delta = self.flow_head.forward(&Tensor::cat(&[&hidden, &x_o], 1)?)?;
            flow = (flow + delta)?;
        }
        let mask = self.mask_head.forward(&hidden)?;
        let up = convex_upsample(&flow, &mask)?;
        cond.hidden = hidden;
        Ok((up / self.normalizer.scale_max)?)
    }

    fn frame_tensor(&self, f: &Frame) -> Result<Tensor, NetError> {
        let (h, w) = f.dim();
        let data: Vec<f32> = f.iter().copied().collect();
        Ok(Tensor::from_vec(data, (1, 1, h, w), self.device())?.to_dtype(self.dtype())?)
    }
}

pub(crate) fn field_to_tensor(field: &VelocityField, dtype: DType, device: &Device) -> Result<Tensor, NetError> {
    let (h, w) = field.shape();
    let data: Vec<f32> = field.u().iter().chain(field.v().iter()).copied().collect();
    Ok(Tensor::from_vec(data, (1, 2, h, w), device)?.to_dtype(dtype)?)
}

/// `[1, 2, H, W]` tensor to a field.
pub(crate) fn tensor_to_field(t: &Tensor, coordinate_scale: f32) -> Result<VelocityField, NetError> {
    let (_, _, h, w) = t.dims4()?;
    let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let (u, v) = data.split_at(h * w);
    let u = Array2::from_shape_vec((h, w), u.to_vec()).expect("length checked");
    let v = Array2::from_shape_vec((h, w), v.to_vec()).expect("length checked");
    Ok(VelocityField::new(u, v, coordinate_scale)?)
}

impl FlowModel for DiffuserNet {
    type Conditions = Conditions;

    fn upsample_factor(&self) -> usize {
        self.cfg.upsample_factor
    }

    fn min_working_side(&self) -> usize {
        8 * self.cfg.min_coarse_side()
    }

    fn normalizer(&self) -> FlowNormalizer {
        self.normalizer
    }

    fn encode(&self, frame_a: &Frame, frame_b: &Frame) -> Result<Conditions, NetError> {
        let mut c = self.encode_batch(&self.frame_tensor(frame_a)?, &self.frame_tensor(frame_b)?)?;
        // inference never backpropagates; drop the graph so x_h does not
        // drag every earlier step along
        c.corr = c.corr.detach();
        c.context = c.context.detach();
        c.hidden = c.hidden.detach();
        c.initial_hidden = c.initial_hidden.detach();
        Ok(c)
    }

    fn denoise_once(&self, cond: &mut Conditions, v_t: &VelocityField, t: usize) -> Result<VelocityField, NetError> {
        let x = field_to_tensor(v_t, self.dtype(), self.device())?;
        let out = self.denoise_batch(cond, &x, &[t])?.detach();
        cond.hidden = cond.hidden.detach();
        tensor_to_field(&out, v_t.coordinate_scale())
    }
}
