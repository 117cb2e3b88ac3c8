//! Noise schedule, flow normalization, forward noising and the reverse
//! sampler for flow-field diffusion.
//!
//! The denoiser predicts the clean normalized flow `v0` directly. Reverse
//! steps use the deterministic implicit update (optionally stochastic via
//! `eta`), so a denoiser that returns the true `v0` reproduces it exactly.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::types::{TypeError, VelocityField};

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("time step {t} (previous {t_prev}) outside schedule of length {len}")]
    ScheduleIndexError { t: usize, t_prev: usize, len: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error(transparent)]
    Type(#[from] TypeError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSchedule {
    /// Squared-cosine cumulative alpha with offset `s = 0.008`, betas capped at 0.999.
    Cosine,
    Linear { beta_start: f64, beta_end: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    kind: NoiseSchedule,
    betas: Vec<f64>,
    /// `alphas_cumprod[t]` for `t` in `0..=T`; index 0 is exactly 1.
    alphas_cumprod: Vec<f64>,
    inference_steps: Vec<usize>,
    pub eta: f64,
}

impl DiffusionSchedule {
    pub fn new(
        train_steps: usize,
        kind: NoiseSchedule,
        inference_step_count: usize,
        eta: f64,
    ) -> Result<Self, DiffusionError> {
        let bad = |m: String| Err(DiffusionError::InvalidSchedule(m));
        if train_steps == 0 {
            return bad("T must be positive".into());
        }
        if !(0.0..=1.0).contains(&eta) {
            return bad(format!("eta {eta} outside [0, 1]"));
        }
        let betas: Vec<f64> = match kind {
            NoiseSchedule::Cosine => {
                let s = 0.008;
                let f = |t: f64| (((t / train_steps as f64) + s) / (1.0 + s) * PI / 2.0).cos().powi(2);
                (1..=train_steps).map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(0.999)).collect()
            }
            NoiseSchedule::Linear { beta_start, beta_end } => (0..train_steps)
                .map(|i| {
                    let frac = if train_steps == 1 { 0.0 } else { i as f64 / (train_steps - 1) as f64 };
                    beta_start + (beta_end - beta_start) * frac
                })
                .collect(),
        };
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return bad("every beta must lie in (0, 1)".into());
        }
        let mut alphas_cumprod = Vec::with_capacity(train_steps + 1);
        alphas_cumprod.push(1.0);
        for &b in &betas {
            let prev = *alphas_cumprod.last().expect("non-empty");
            alphas_cumprod.push(prev * (1.0 - b));
        }
        let last = alphas_cumprod[train_steps];
        if !(last > 0.0 && last < 0.01) {
            return bad(format!("final cumulative alpha {last} must lie in (0, 0.01)"));
        }
        let mut sched = Self { kind, betas, alphas_cumprod, inference_steps: Vec::new(), eta };
        sched.set_inference_steps(inference_step_count)?;
        Ok(sched)
    }

    /// Cosine schedule, T = 1000, 6 deterministic inference steps.
    pub fn default_cosine() -> Self {
        Self::new(1000, NoiseSchedule::Cosine, 6, 0.0).expect("default schedule is valid")
    }

    /// Evenly spaced inference steps `round(T * i / n)`, `i = n..1`.
    pub fn set_inference_steps(&mut self, n: usize) -> Result<(), DiffusionError> {
        let t = self.train_steps();
        if n == 0 || n > t {
            return Err(DiffusionError::InvalidSchedule(format!("inference step count {n} outside [1, {t}]")));
        }
        self.inference_steps = (1..=n)
            .rev()
            .map(|i| ((t as f64 * i as f64) / n as f64).round() as usize)
            .collect();
        Ok(())
    }

    pub fn with_inference_steps(mut self, n: usize) -> Result<Self, DiffusionError> {
        self.set_inference_steps(n)?;
        Ok(self)
    }

    pub fn kind(&self) -> NoiseSchedule {
        self.kind
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    /// Descending time steps visited by the sampler.
    pub fn inference_steps(&self) -> &[usize] {
        &self.inference_steps
    }

    pub fn alpha_bar(&self, t: usize) -> Option<f64> {
        self.alphas_cumprod.get(t).copied()
    }
}

/// Maps pixel displacements to roughly `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowNormalizer {
    pub scale_max: f64,
    pub clamp: bool,
}

impl Default for FlowNormalizer {
    fn default() -> Self {
        Self { scale_max: 16.0, clamp: true }
    }
}

impl FlowNormalizer {
    pub fn new(scale_max: f64, clamp: bool) -> Result<Self, DiffusionError> {
        if !(scale_max > 0.0 && scale_max.is_finite()) {
            return Err(DiffusionError::InvalidSchedule(format!("scale_max {scale_max} must be positive")));
        }
        Ok(Self { scale_max, clamp })
    }

    pub fn normalize_value(&self, x: f32) -> f32 {
        let y = x as f64 / self.scale_max;
        (if self.clamp { y.clamp(-1.0, 1.0) } else { y }) as f32
    }

    pub fn denormalize_value(&self, y: f32) -> f32 {
        (y as f64 * self.scale_max) as f32
    }

    pub fn normalize(&self, field: &VelocityField) -> VelocityField {
        field.map(|x| self.normalize_value(x))
    }

    pub fn denormalize(&self, field: &VelocityField) -> VelocityField {
        field.map(|y| self.denormalize_value(y))
    }
}

fn check_shape(a: &VelocityField, b: &VelocityField) -> Result<(), DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

/// `a * x + b * y` elementwise, evaluated in f64.
fn combine(x: &VelocityField, a: f64, y: &VelocityField, b: f64) -> Result<VelocityField, DiffusionError> {
    let mix = |p: &Array2<f32>, q: &Array2<f32>| {
        let mut out = p.clone();
        ndarray::Zip::from(&mut out).and(p).and(q).for_each(|o, &p, &q| *o = (a * p as f64 + b * q as f64) as f32);
        out
    };
    Ok(VelocityField::new(mix(x.u(), y.u()), mix(x.v(), y.v()), x.coordinate_scale())?)
}

/// Standard-normal field of the given shape.
pub fn gaussian_field(
    height: usize,
    width: usize,
    coordinate_scale: f32,
    rng: &mut impl Rng,
) -> Result<VelocityField, DiffusionError> {
    let mut draw = || Array2::from_shape_simple_fn((height, width), || StandardNormal.sample(&mut *rng));
    let u: Array2<f32> = draw();
    let v: Array2<f32> = draw();
    Ok(VelocityField::new(u, v, coordinate_scale)?)
}

/// `v_t = sqrt(abar_t) v0 + sqrt(1 - abar_t) noise`.
pub fn forward_noise(
    v0: &VelocityField,
    t: usize,
    noise: &VelocityField,
    schedule: &DiffusionSchedule,
) -> Result<VelocityField, DiffusionError> {
    check_shape(v0, noise)?;
    let len = schedule.train_steps();
    if t == 0 || t > len {
        return Err(DiffusionError::ScheduleIndexError { t, t_prev: 0, len });
    }
    let ab = schedule.alphas_cumprod[t];
    combine(v0, ab.sqrt(), noise, (1.0 - ab).sqrt())
}

/// One reverse update from `t` to `t_prev` given the predicted clean flow.
/// `rng` is only drawn from when `schedule.eta > 0`.
pub fn reverse_step(
    v_t: &VelocityField,
    t: usize,
    t_prev: usize,
    predicted_v0: &VelocityField,
    schedule: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<VelocityField, DiffusionError> {
    check_shape(v_t, predicted_v0)?;
    let len = schedule.train_steps();
    if t == 0 || t > len || t_prev >= t {
        return Err(DiffusionError::ScheduleIndexError { t, t_prev, len });
    }
    let ab_t = schedule.alphas_cumprod[t];
    let ab_prev = schedule.alphas_cumprod[t_prev];
    // implied noise: (v_t - sqrt(ab_t) v0) / sqrt(1 - ab_t)
    let eps = combine(v_t, 1.0 / (1.0 - ab_t).sqrt(), predicted_v0, -ab_t.sqrt() / (1.0 - ab_t).sqrt())?;
    let sigma = schedule.eta * ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)).max(0.0).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mean = combine(predicted_v0, ab_prev.sqrt(), &eps, dir)?;
    if sigma > 0.0 {
        let (h, w) = v_t.shape();
        let z = gaussian_field(h, w, v_t.coordinate_scale(), rng)?;
        combine(&mean, 1.0, &z, sigma)
    } else {
        Ok(mean)
    }
}

/// Grid the sampler runs on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldShape {
    pub height: usize,
    pub width: usize,
    pub coordinate_scale: f32,
}

/// Runs the reverse chain from `v_T ~ N(0, I)` over the schedule's inference
/// steps. `denoiser(v_t, t)` returns the predicted clean normalized flow and
/// may keep state (conditions, recurrent hidden state) between calls.
pub fn sample<F, E>(
    mut denoiser: F,
    shape: FieldShape,
    schedule: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<VelocityField, E>
where
    F: FnMut(&VelocityField, usize) -> Result<VelocityField, E>,
    E: From<DiffusionError>,
{
    let mut v = gaussian_field(shape.height, shape.width, shape.coordinate_scale, rng)?;
    let steps = schedule.inference_steps();
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let predicted = denoiser(&v, t)?;
        v = reverse_step(&v, t, t_prev, &predicted, schedule, rng)?;
    }
    Ok(v)
}
