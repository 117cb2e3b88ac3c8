//! Scale-adaptation wrapper around a diffusion flow model.

use pivdiff_core::diffusion::{sample, DiffusionSchedule, FieldShape, FlowNormalizer};
use pivdiff_core::resample::{crop, downsample_field, pad_edge, upsample};
use pivdiff_core::{Frame, ImagePair, VelocityField};
use rand::Rng;

use crate::NetError;

/// What [`estimate`] needs from a denoiser.
pub trait FlowModel {
    /// Per-pair state such as encoder features and the recurrent hidden state.
    type Conditions;

    /// Bilinear input magnification `s` (1 or 2).
    fn upsample_factor(&self) -> usize;

    /// Smallest working-resolution side the model accepts (a multiple of 8).
    fn min_working_side(&self) -> usize {
        8
    }

    fn normalizer(&self) -> FlowNormalizer;

    /// Frames arrive at working resolution, padded to multiples of 8.
    fn encode(&self, frame_a: &Frame, frame_b: &Frame) -> Result<Self::Conditions, NetError>;

    /// Predicted clean normalized flow for the normalized state `v_t` at step `t`.
    fn denoise_once(
        &self,
        cond: &mut Self::Conditions,
        v_t: &VelocityField,
        t: usize,
    ) -> Result<VelocityField, NetError>;
}

fn round_up(x: usize, m: usize) -> usize {
    x.div_ceil(m) * m
}

/// Upsample by `s`, pad to the model grid, run the reverse diffusion chain,
/// then crop, block-average and divide by `s`. The result is in native pixels
/// per frame with the input's shape.
pub fn estimate<M: FlowModel>(
    pair: &ImagePair,
    model: &M,
    schedule: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<VelocityField, NetError> {
    let s = model.upsample_factor();
    if !matches!(s, 1 | 2) {
        return Err(NetError::Config(format!("upsample factor must be 1 or 2, got {s}")));
    }
    let (h, w) = (pair.height(), pair.width());
    let (hs, ws) = (h * s, w * s);
    let min_side = round_up(model.min_working_side().max(8), 8);
    let (ph, pw) = (round_up(hs, 8).max(min_side), round_up(ws, 8).max(min_side));
    let prep = |f: &Frame| {
        let up = if s == 1 { f.clone() } else { upsample(f, s) };
        pad_edge(&up, ph, pw)
    };
    let mut cond = model.encode(&prep(pair.frame_a()), &prep(pair.frame_b()))?;
    let shape = FieldShape { height: ph, width: pw, coordinate_scale: s as f32 };
    let normalized = sample(|v, t| model.denoise_once(&mut cond, v, t), shape, schedule, rng)?;
    let pixels = model.normalizer().denormalize(&normalized);
    let (u, v) = pixels.into_components();
    let working = VelocityField::new(crop(&u, 0, 0, hs, ws), crop(&v, 0, 0, hs, ws), s as f32)?;
    Ok(downsample_field(&working, s)?)
}

/// Reference model that ignores its inputs and always predicts one constant
/// working-resolution flow. With `s = 2` and twice the native flow it pins
/// down the wrapper's value-scaling contract.
#[derive(Debug, Clone)]
pub struct ConstantFlowModel {
    pub working_flow: (f32, f32),
    pub factor: usize,
    pub normalizer: FlowNormalizer,
}

impl FlowModel for ConstantFlowModel {
    type Conditions = ();

    fn upsample_factor(&self) -> usize {
        self.factor
    }

    fn normalizer(&self) -> FlowNormalizer {
        self.normalizer
    }

    fn encode(&self, _: &Frame, _: &Frame) -> Result<(), NetError> {
        Ok(())
    }

    fn denoise_once(&self, _: &mut (), v_t: &VelocityField, _: usize) -> Result<VelocityField, NetError> {
        let n = self.normalizer;
        let (u, v) = (n.normalize_value(self.working_flow.0), n.normalize_value(self.working_flow.1));
        Ok(VelocityField::constant(v_t.height(), v_t.width(), u, v).with_coordinate_scale(v_t.coordinate_scale())?)
    }
}
