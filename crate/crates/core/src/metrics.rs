//! End-point, root-mean-square and angular error between flow fields.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{VelocityField, INVALID_FLOW_THRESHOLD};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: prediction {0:?} vs ground truth {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("no valid pixels to evaluate")]
    EmptyValidSet,
    #[error("invalid metric options: {0}")]
    InvalidOptions(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    /// Floor for the angular-error denominator; also the zero-vector cutoff.
    pub aae_epsilon: f64,
    /// Components above this magnitude mark unknown flow.
    pub invalid_value_threshold: f64,
    /// Pixels excluded from each image edge.
    pub border_crop: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { aae_epsilon: 1e-12, invalid_value_threshold: INVALID_FLOW_THRESHOLD as f64, border_crop: 0 }
    }
}

/// Marker written into residual maps at excluded pixels.
pub const RESIDUAL_INVALID: f32 = f32::NAN;

fn check(pred: &VelocityField, gt: &VelocityField, opts: &MetricOptions) -> Result<(), MetricError> {
    if pred.shape() != gt.shape() {
        return Err(MetricError::ShapeMismatch(pred.shape(), gt.shape()));
    }
    if !(opts.aae_epsilon > 0.0) {
        return Err(MetricError::InvalidOptions("aae_epsilon must be positive".into()));
    }
    Ok(())
}

/// Pixels where both fields hold usable vectors and that survive the border crop.
pub fn valid_mask(pred: &VelocityField, gt: &VelocityField, opts: &MetricOptions) -> Array2<bool> {
    let (h, w) = gt.shape();
    let b = opts.border_crop;
    let ok = |x: f32| x.is_finite() && (x.abs() as f64) <= opts.invalid_value_threshold;
    Array2::from_shape_fn((h, w), |(y, x)| {
        y >= b
            && x >= b
            && y + b < h
            && x + b < w
            && ok(pred.u()[[y, x]])
            && ok(pred.v()[[y, x]])
            && ok(gt.u()[[y, x]])
            && ok(gt.v()[[y, x]])
    })
}

/// Raw per-sample sums, enough for both per-sample and pixel-pooled aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorSums {
    pub valid_pixels: usize,
    pub sum_epe: f64,
    pub sum_sq_epe: f64,
    pub angular_pixels: usize,
    pub sum_angle: f64,
    /// Valid pixels left out of the angular mean because a vector was ~zero.
    pub angular_excluded: usize,
}

pub fn error_sums(pred: &VelocityField, gt: &VelocityField, opts: &MetricOptions) -> Result<ErrorSums, MetricError> {
    check(pred, gt, opts)?;
    let mask = valid_mask(pred, gt, opts);
    let mut s = ErrorSums::default();
    for ((y, x), &ok) in mask.indexed_iter() {
        if !ok {
            continue;
        }
        let (pu, pv) = (pred.u()[[y, x]] as f64, pred.v()[[y, x]] as f64);
        let (gu, gv) = (gt.u()[[y, x]] as f64, gt.v()[[y, x]] as f64);
        let (du, dv) = (pu - gu, pv - gv);
        let sq = du * du + dv * dv;
        s.valid_pixels += 1;
        s.sum_epe += sq.sqrt();
        s.sum_sq_epe += sq;
        let (np, ng) = (pu.hypot(pv), gu.hypot(gv));
        if np < opts.aae_epsilon || ng < opts.aae_epsilon {
            s.angular_excluded += 1;
        } else {
            let cos = ((pu * gu + pv * gv) / (np * ng).max(opts.aae_epsilon)).clamp(-1.0, 1.0);
            s.angular_pixels += 1;
            s.sum_angle += cos.acos();
        }
    }
    Ok(s)
}

impl ErrorSums {
    pub fn aee(&self) -> Result<f64, MetricError> {
        if self.valid_pixels == 0 {
            return Err(MetricError::EmptyValidSet);
        }
        Ok(self.sum_epe / self.valid_pixels as f64)
    }

    pub fn rmse(&self) -> Result<f64, MetricError> {
        if self.valid_pixels == 0 {
            return Err(MetricError::EmptyValidSet);
        }
        Ok((self.sum_sq_epe / self.valid_pixels as f64).sqrt())
    }

    pub fn aae(&self) -> Result<f64, MetricError> {
        if self.angular_pixels == 0 {
            return Err(MetricError::EmptyValidSet);
        }
        Ok(self.sum_angle / self.angular_pixels as f64)
    }

    pub fn merge(&mut self, other: &ErrorSums) {
        self.valid_pixels += other.valid_pixels;
        self.sum_epe += other.sum_epe;
        self.sum_sq_epe += other.sum_sq_epe;
        self.angular_pixels += other.angular_pixels;
        self.sum_angle += other.sum_angle;
        self.angular_excluded += other.angular_excluded;
    }
}

/// Average end-point error (pixels/frame).
pub fn aee(pred: &VelocityField, gt: &VelocityField, opts: &MetricOptions) -> Result<f64, MetricError> {
    error_sums(pred, gt, opts)?.aee()
}

/// Root of the mean squared end-point error (pixels/frame).
pub fn rmse(pred: &VelocityField, gt: &VelocityField, opts: &MetricOptions) -> Result<f64, MetricError> {
    error_sums(pred, gt, opts)?.rmse()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngularError {
    /// Mean angle in radians over included pixels.
    pub mean: f64,
    pub included: usize,
    pub excluded: usize,
}

/// Average angular error. Pixels where either vector is shorter than
/// `aae_epsilon` are excluded and tallied.
pub fn aae(pred: &VelocityField, gt: &VelocityField, opts: &MetricOptions) -> Result<AngularError, MetricError> {
    let s = error_sums(pred, gt, opts)?;
    Ok(AngularError { mean: s.aae()?, included: s.angular_pixels, excluded: s.angular_excluded })
}

/// Per-pixel end-point error; excluded pixels hold [`RESIDUAL_INVALID`].
pub fn residual_map(pred: &VelocityField, gt: &VelocityField) -> Result<Array2<f32>, MetricError> {
    let opts = MetricOptions::default();
    check(pred, gt, &opts)?;
    let mask = valid_mask(pred, gt, &opts);
    Ok(Array2::from_shape_fn(gt.shape(), |(y, x)| {
        if !mask[[y, x]] {
            return RESIDUAL_INVALID;
        }
        let du = pred.u()[[y, x]] as f64 - gt.u()[[y, x]] as f64;
        let dv = pred.v()[[y, x]] as f64 - gt.v()[[y, x]] as f64;
        du.hypot(dv) as f32
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn one(pu: f32, pv: f32, gu: f32, gv: f32) -> (VelocityField, VelocityField) {
        (VelocityField::constant(1, 1, pu, pv), VelocityField::constant(1, 1, gu, gv))
    }

    #[test]
    fn three_four_five() {
        let gt = VelocityField::zeros(8, 8);
        let pred = VelocityField::constant(8, 8, 3.0, 4.0);
        let o = MetricOptions::default();
        assert_eq!(aee(&pred, &gt, &o).unwrap(), 5.0);
        assert_eq!(rmse(&pred, &gt, &o).unwrap(), 5.0);
        assert_eq!(aee(&gt, &gt, &o).unwrap(), 0.0);
    }

    #[test]
    fn rmse_of_two_pixels() {
        let gt = VelocityField::zeros(1, 2);
        let u = Array2::from_shape_vec((1, 2), vec![0.0, 2.0]).unwrap();
        let pred = VelocityField::new(u, Array2::zeros((1, 2)), 1.0).unwrap();
        assert!((rmse(&pred, &gt, &MetricOptions::default()).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn angular_cases() {
        let o = MetricOptions::default();
        let (p, g) = one(1.0, 0.0, 0.0, 1.0);
        assert_eq!(aae(&p, &g, &o).unwrap().mean, FRAC_PI_2);
        let (p, g) = one(1.0, 0.0, -1.0, 0.0);
        assert_eq!(aae(&p, &g, &o).unwrap().mean, PI);
        let (p, g) = one(2.0, 2.0, 0.5, 0.5);
        assert!(aae(&p, &g, &o).unwrap().mean < 1e-6);
        let (p, g) = one(0.0, 0.0, 1.0, 0.0);
        assert_eq!(aae(&p, &g, &o), Err(MetricError::EmptyValidSet));
    }

    #[test]
    fn residual_map_values() {
        let gt = VelocityField::zeros(2, 2);
        let mut u = Array2::zeros((2, 2));
        let mut v = Array2::zeros((2, 2));
        u[[1, 0]] = 0.6;
        v[[1, 0]] = 0.8;
        let pred = VelocityField::new(u, v, 1.0).unwrap();
        let r = residual_map(&pred, &gt).unwrap();
        assert!((r[[1, 0]] - 1.0).abs() < 1e-7);
        assert_eq!(r.iter().filter(|&&x| x == 0.0).count(), 3);
        assert!(residual_map(&pred, &VelocityField::zeros(3, 2)).is_err());
    }

    #[test]
    fn markers_and_border_are_excluded() {
        let mut u = Array2::zeros((4, 4));
        u[[0, 0]] = 1e10;
        let gt = VelocityField::new(u, Array2::zeros((4, 4)), 1.0).unwrap();
        let pred = VelocityField::constant(4, 4, 1.0, 0.0);
        assert_eq!(aee(&pred, &gt, &MetricOptions::default()).unwrap(), 1.0);
        assert!(residual_map(&pred, &gt).unwrap()[[0, 0]].is_nan());
        let crop = MetricOptions { border_crop: 1, ..MetricOptions::default() };
        assert_eq!(error_sums(&pred, &gt, &crop).unwrap().valid_pixels, 4);
        let all = MetricOptions { border_crop: 2, ..MetricOptions::default() };
        assert_eq!(aee(&pred, &gt, &all), Err(MetricError::EmptyValidSet));
    }
}
