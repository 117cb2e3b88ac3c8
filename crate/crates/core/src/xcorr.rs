//! Multipass window-deformation cross-correlation (WIDIM-style) estimator.
//!
//! Each pass interrogates a regular grid of square windows with FFT-based
//! circular cross-correlation, rejects outliers with the normalized median
//! test, fills the holes, and hands a dense predictor to the next (finer)
//! pass which correlates against frame B warped by that predictor.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::resample::sample_bilinear;
use crate::types::{ImagePair, VelocityField};

#[derive(Debug, Error, PartialEq)]
pub enum XcorrError {
    #[error("window has no intensity variation")]
    FlatWindow,
    #[error("windows must be equal squares of side >= 8, got {0:?} and {1:?}")]
    BadWindow((usize, usize), (usize, usize)),
    #[error("image {height}x{width} is smaller than the {window} px window")]
    ImageTooSmall { height: usize, width: usize, window: usize },
    #[error("invalid WIDIM config: {0}")]
    InvalidConfig(String),
    #[error("grid must be at least 3x3 for the median test, got {0}x{1}")]
    GridTooSmall(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubpixelFit {
    /// Three-point Gaussian fit per axis, parabolic fallback on non-positive samples.
    Gaussian3Point,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WidimConfig {
    pub window_sizes: Vec<usize>,
    pub overlap_fraction: f64,
    pub subpixel_fit: SubpixelFit,
    /// Normalized median test threshold.
    pub outlier_threshold: f64,
    /// Added to the median residual in the normalized median test (px).
    pub median_epsilon: f64,
    /// Extra deformation passes repeated at the smallest window.
    pub final_refinements: usize,
}

impl Default for WidimConfig {
    fn default() -> Self {
        Self {
            window_sizes: vec![64, 32, 16],
            overlap_fraction: 0.5,
            subpixel_fit: SubpixelFit::Gaussian3Point,
            outlier_threshold: 2.0,
            median_epsilon: 0.1,
            final_refinements: 1,
        }
    }
}

impl WidimConfig {
    pub fn validate(&self) -> Result<(), XcorrError> {
        let bad = |m: &str| Err(XcorrError::InvalidConfig(m.to_string()));
        if self.window_sizes.is_empty() {
            return bad("at least one window size is required");
        }
        if self.window_sizes.iter().any(|&w| !w.is_power_of_two() || w < 8) {
            return bad("window sizes must be powers of two and at least 8");
        }
        if self.window_sizes.windows(2).any(|p| p[1] >= p[0]) {
            return bad("window sizes must be strictly decreasing");
        }
        if !(0.0..=0.75).contains(&self.overlap_fraction) {
            return bad("overlap_fraction must lie in [0, 0.75]");
        }
        Ok(())
    }

    pub fn largest_window(&self) -> usize {
        self.window_sizes.first().copied().unwrap_or(0)
    }
}

/// Correlation peak of one window pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowPeak {
    pub dx: f64,
    pub dy: f64,
    /// Highest over second-highest correlation peak.
    pub peak_ratio: f64,
}

/// Cached forward/inverse FFT plans for one window side.
pub struct Correlator {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Correlator {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { n, fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n) }
    }

    fn fft2(&self, data: &mut [Complex<f64>], plan: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        for row in data.chunks_exact_mut(n) {
            plan.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); n];
        for x in 0..n {
            for y in 0..n {
                col[y] = data[y * n + x];
            }
            plan.process(&mut col);
            for y in 0..n {
                data[y * n + x] = col[y];
            }
        }
    }

    /// Mean-subtracted circular cross-correlation `C(k) = sum_x a(x) b(x + k)`.
    fn correlation_plane(&self, a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<Vec<f64>, XcorrError> {
        let n = self.n;
        let centered = |w: ArrayView2<f32>| -> Result<Vec<Complex<f64>>, XcorrError> {
            let mean = w.iter().map(|&v| v as f64).sum::<f64>() / (n * n) as f64;
            let out: Vec<Complex<f64>> = w.iter().map(|&v| Complex::new(v as f64 - mean, 0.0)).collect();
            let energy: f64 = out.iter().map(|c| c.re * c.re).sum();
            if energy <= 1e-12 {
                return Err(XcorrError::FlatWindow);
            }
            Ok(out)
        };
        let mut fa = centered(a)?;
        let mut fb = centered(b)?;
        self.fft2(&mut fa, &self.fwd);
        self.fft2(&mut fb, &self.fwd);
        for (x, y) in fa.iter_mut().zip(fb.iter()) {
            *x = x.conj() * y;
        }
        self.fft2(&mut fa, &self.inv);
        let norm = 1.0 / (n * n) as f64;
        Ok(fa.iter().map(|c| c.re * norm).collect())
    }

    pub fn correlate(&self, a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<WindowPeak, XcorrError> {
        let n = self.n;
        if a.dim() != (n, n) || b.dim() != (n, n) {
            return Err(XcorrError::BadWindow(a.dim(), b.dim()));
        }
        let plane = self.correlation_plane(a, b)?;
        let at = |y: usize, x: usize| plane[(y % n) * n + (x % n)];
        let (mut py, mut px, mut best) = (0, 0, f64::NEG_INFINITY);
        for y in 0..n {
            for x in 0..n {
                if at(y, x) > best {
                    best = at(y, x);
                    py = y;
                    px = x;
                }
            }
        }
        let fx = gaussian_peak_offset(at(py, px + n - 1), best, at(py, px + 1));
        let fy = gaussian_peak_offset(at(py + n - 1, px), best, at(py + 1, px));

        let mut second = f64::NEG_INFINITY;
        for y in 0..n {
            for x in 0..n {
                let near = |d: usize, p: usize| {
                    let diff = (d + n - p) % n;
                    diff <= 1 || diff >= n - 1
                };
                if near(y, py) && near(x, px) {
                    continue;
                }
                let c = at(y, x);
                let is_max = (0..3).all(|dy| {
                    (0..3).all(|dx| (dy == 1 && dx == 1) || c >= at(y + n - 1 + dy, x + n - 1 + dx))
                });
                if is_max && c > second {
                    second = c;
                }
            }
        }
        let peak_ratio = if second > 0.0 { best / second } else { f64::INFINITY };

        let wrap = |i: usize| if i > n / 2 { i as f64 - n as f64 } else { i as f64 };
        Ok(WindowPeak { dx: wrap(px) + fx, dy: wrap(py) + fy, peak_ratio })
    }
}

/// Sub-pixel offset of a peak from its two neighbours.
fn gaussian_peak_offset(minus: f64, center: f64, plus: f64) -> f64 {
    let offset = if minus > 0.0 && center > 0.0 && plus > 0.0 {
        let (lm, l0, lp) = (minus.ln(), center.ln(), plus.ln());
        let den = 2.0 * lm - 4.0 * l0 + 2.0 * lp;
        if den != 0.0 {
            (lm - lp) / den
        } else {
            0.0
        }
    } else {
        let den = 2.0 * minus - 4.0 * center + 2.0 * plus;
        if den != 0.0 {
            (minus - plus) / den
        } else {
            0.0
        }
    };
    if offset.is_finite() {
        offset.clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Displacement of `win_b` relative to `win_a`.
pub fn correlate_window(win_a: ArrayView2<f32>, win_b: ArrayView2<f32>) -> Result<WindowPeak, XcorrError> {
    let (h, w) = win_a.dim();
    if h != w || h < 8 || win_b.dim() != (h, w) {
        return Err(XcorrError::BadWindow(win_a.dim(), win_b.dim()));
    }
    Correlator::new(h).correlate(win_a, win_b)
}

/// Displacements sampled on a regular grid of window centers.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    /// Continuous coordinate of the first center.
    pub origin: (f64, f64),
    pub step: f64,
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

impl GridField {
    /// Bilinear interpolation at continuous `(x, y)`, clamped to the outer centers.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let (ny, nx) = self.u.dim();
        let gx = ((x - self.origin.0) / self.step).clamp(0.0, (nx - 1) as f64);
        let gy = ((y - self.origin.1) / self.step).clamp(0.0, (ny - 1) as f64);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(nx - 1), (y0 + 1).min(ny - 1));
        let (ax, ay) = (gx - x0 as f64, gy - y0 as f64);
        let lerp = |f: &Array2<f64>| {
            let top = f[[y0, x0]] * (1.0 - ax) + f[[y0, x1]] * ax;
            let bottom = f[[y1, x0]] * (1.0 - ax) + f[[y1, x1]] * ax;
            top * (1.0 - ay) + bottom * ay
        };
        (lerp(&self.u), lerp(&self.v))
    }

    pub fn to_dense(&self, height: usize, width: usize) -> VelocityField {
        VelocityField::from_fn(height, width, |y, x| {
            let (u, v) = self.sample(x as f64 + 0.5, y as f64 + 0.5);
            (u as f32, v as f32)
        })
    }
}

/// Top-left corners of the windows along one axis.
fn window_positions(extent: usize, window: usize, step: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=extent - window).step_by(step).collect();
    if out.is_empty() {
        out.push(0);
    }
    out
}

/// Normalized median test; returns `true` for vectors that pass.
///
/// A vector fails when `|x - median(neighbours)| / (median(|neighbour residuals|) + eps)`
/// exceeds `threshold`, evaluated on the combined magnitude of both components.
pub fn normalized_median_filter(
    u: &Array2<f64>,
    v: &Array2<f64>,
    threshold: f64,
    eps: f64,
) -> Result<Array2<bool>, XcorrError> {
    let (ny, nx) = u.dim();
    if ny < 3 || nx < 3 {
        return Err(XcorrError::GridTooSmall(ny, nx));
    }
    let median = |vals: &mut Vec<f64>| -> f64 {
        vals.sort_by(|a, b| a.total_cmp(b));
        let m = vals.len();
        if m % 2 == 1 {
            vals[m / 2]
        } else {
            0.5 * (vals[m / 2 - 1] + vals[m / 2])
        }
    };
    let mut valid = Array2::from_elem((ny, nx), true);
    let mut neigh_u = Vec::with_capacity(8);
    let mut neigh_v = Vec::with_capacity(8);
    for y in 0..ny {
        for x in 0..nx {
            neigh_u.clear();
            neigh_v.clear();
            for yy in y.saturating_sub(1)..=(y + 1).min(ny - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(nx - 1) {
                    if (yy, xx) != (y, x) {
                        neigh_u.push(u[[yy, xx]]);
                        neigh_v.push(v[[yy, xx]]);
                    }
                }
            }
            let residual = |neigh: &mut Vec<f64>, center: f64| {
                let m = median(neigh);
                let mut res: Vec<f64> = neigh.iter().map(|n| (n - m).abs()).collect();
                let rm = median(&mut res);
                (center - m).abs() / (rm + eps)
            };
            let ru = residual(&mut neigh_u, u[[y, x]]);
            let rv = residual(&mut neigh_v, v[[y, x]]);
            valid[[y, x]] = ru.hypot(rv) <= threshold;
        }
    }
    Ok(valid)
}

/// Replaces invalid vectors by the mean of valid 8-neighbours, growing
/// inwards until every hole is filled.
fn fill_invalid(u: &mut Array2<f64>, v: &mut Array2<f64>, valid: &mut Array2<bool>) {
    let (ny, nx) = u.dim();
    if !valid.iter().any(|&b| b) {
        u.fill(0.0);
        v.fill(0.0);
        valid.fill(true);
        return;
    }
    while valid.iter().any(|&b| !b) {
        let snapshot = valid.clone();
        for y in 0..ny {
            for x in 0..nx {
                if snapshot[[y, x]] {
                    continue;
                }
                let (mut su, mut sv, mut k) = (0.0, 0.0, 0usize);
                for yy in y.saturating_sub(1)..=(y + 1).min(ny - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(nx - 1) {
                        if snapshot[[yy, xx]] {
                            su += u[[yy, xx]];
                            sv += v[[yy, xx]];
                            k += 1;
                        }
                    }
                }
                if k > 0 {
                    u[[y, x]] = su / k as f64;
                    v[[y, x]] = sv / k as f64;
                    valid[[y, x]] = true;
                }
            }
        }
    }
}

fn warp(frame: &Array2<f32>, predictor: &VelocityField) -> Array2<f32> {
    let (h, w) = frame.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let px = x as f64 + 0.5 + predictor.u()[[y, x]] as f64;
        let py = y as f64 + 0.5 + predictor.v()[[y, x]] as f64;
        sample_bilinear(frame, px, py)
    })
}

fn interrogate(
    frame_a: &Array2<f32>,
    frame_b: &Array2<f32>,
    window: usize,
    overlap: f64,
    predictor: Option<&GridField>,
) -> (GridField, Array2<bool>) {
    let (h, w) = frame_a.dim();
    let step = ((window as f64 * (1.0 - overlap)).round() as usize).max(1);
    let ys = window_positions(h, window, step);
    let xs = window_positions(w, window, step);
    let correlator = Correlator::new(window);
    let half = window as f64 / 2.0;
    let results: Vec<Option<(f64, f64)>> = ys
        .par_iter()
        .flat_map_iter(|&y0| xs.iter().map(move |&x0| (y0, x0)))
        .map(|(y0, x0)| {
            let wa = frame_a.slice(ndarray::s![y0..y0 + window, x0..x0 + window]);
            let wb = frame_b.slice(ndarray::s![y0..y0 + window, x0..x0 + window]);
            let base = predictor.map(|p| p.sample(x0 as f64 + half, y0 as f64 + half)).unwrap_or((0.0, 0.0));
            correlator.correlate(wa, wb).ok().map(|pk| (base.0 + pk.dx, base.1 + pk.dy))
        })
        .collect();
    let (ny, nx) = (ys.len(), xs.len());
    let mut u = Array2::zeros((ny, nx));
    let mut v = Array2::zeros((ny, nx));
    let mut valid = Array2::from_elem((ny, nx), false);
    for (i, r) in results.into_iter().enumerate() {
        if let Some((du, dv)) = r {
            u[[i / nx, i % nx]] = du;
            v[[i / nx, i % nx]] = dv;
            valid[[i / nx, i % nx]] = true;
        }
    }
    let grid = GridField { origin: (xs[0] as f64 + half, ys[0] as f64 + half), step: step as f64, u, v };
    (grid, valid)
}

/// Dense displacement estimate of `pair` from frame A to frame B.
pub fn widim_estimate(pair: &ImagePair, cfg: &WidimConfig) -> Result<VelocityField, XcorrError> {
    cfg.validate()?;
    let (h, w) = (pair.height(), pair.width());
    let largest = cfg.largest_window();
    if h < largest || w < largest {
        return Err(XcorrError::ImageTooSmall { height: h, width: w, window: largest });
    }
    let smallest = *cfg.window_sizes.last().expect("validated non-empty");
    let passes = cfg.window_sizes.iter().copied().chain(std::iter::repeat_n(smallest, cfg.final_refinements));

    let mut predictor: Option<GridField> = None;
    for window in passes {
        let deformed;
        let frame_b = match &predictor {
            Some(p) => {
                deformed = warp(pair.frame_b(), &p.to_dense(h, w));
                &deformed
            }
            None => pair.frame_b(),
        };
        let (mut grid, mut valid) = interrogate(pair.frame_a(), frame_b, window, cfg.overlap_fraction, predictor.as_ref());
        let (ny, nx) = grid.u.dim();
        if ny >= 3 && nx >= 3 {
            // holes first, so the median test sees plausible neighbours
            fill_invalid(&mut grid.u, &mut grid.v, &mut valid);
            let passed = normalized_median_filter(&grid.u, &grid.v, cfg.outlier_threshold, cfg.median_epsilon)?;
            valid = passed;
        }
        fill_invalid(&mut grid.u, &mut grid.v, &mut valid);
        predictor = Some(grid);
    }
    Ok(predictor.expect("at least one pass").to_dense(h, w))
}
