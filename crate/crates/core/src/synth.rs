//! Synthetic PIV recordings: analytic ground-truth flows, particle seeding,
//! Gaussian-blob rendering and single-step forward advection.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::resample::sample_bilinear;
use crate::types::{CaseLabel, Frame, ImagePair, Split, TypeError, VelocityField, FlowSample};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("only {0} particles would be seeded; at least 4 are required")]
    DensityOverflow(usize),
    #[error("flow shape {flow:?} differs from configured image shape {config:?}")]
    ShapeMismatch { flow: (usize, usize), config: (usize, usize) },
    #[error("cannot parse flow '{0}'")]
    BadFlowSpec(String),
    #[error("per_flow must be at least 1")]
    EmptyRequest,
    #[error(transparent)]
    Type(#[from] TypeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    /// Particles per pixel.
    pub particle_density: f64,
    /// Gaussian blob standard deviation in pixels.
    pub particle_diameter_sigma: f64,
    pub peak_intensity_range: (f64, f64),
    pub noise_std: f64,
    pub background_level: f64,
    pub rng_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 256,
            width: 256,
            particle_density: 0.05,
            particle_diameter_sigma: 1.0,
            peak_intensity_range: (0.5, 1.0),
            noise_std: 0.0,
            background_level: 0.0,
            rng_seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if !(self.particle_density > 0.0 && self.particle_density <= 0.2) {
            return bad("particle_density must lie in (0, 0.2]");
        }
        if !(0.5..=3.0).contains(&self.particle_diameter_sigma) {
            return bad("particle_diameter_sigma must lie in [0.5, 3.0]");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative");
        }
        let (lo, hi) = self.peak_intensity_range;
        if !(0.0 <= lo && lo <= hi) {
            return bad("peak_intensity_range must be ordered and non-negative");
        }
        if self.height == 0 || self.width == 0 {
            return bad("image dimensions must be positive");
        }
        Ok(())
    }

    pub fn particle_count(&self) -> usize {
        (self.particle_density * (self.height * self.width) as f64).round() as usize
    }
}

/// Closed-form stand-in flows. Centers default to the image center.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticFlow {
    Uniform { u: f64, v: f64 },
    /// Solid-body rotation with angular displacement `omega` rad/frame.
    Rotation { omega: f64, center: Option<(f64, f64)> },
    /// `u = rate * (y - cy)`, `v = 0`.
    Shear { rate: f64 },
    LambOseen { circulation: f64, core_radius: f64, center: Option<(f64, f64)> },
    /// Divergence-free periodic cells.
    Cellular { amplitude: f64, wavelength: f64 },
}

impl AnalyticFlow {
    pub fn kind(&self) -> &'static str {
        match self {
            AnalyticFlow::Uniform { .. } => "uniform",
            AnalyticFlow::Rotation { .. } => "rotation",
            AnalyticFlow::Shear { .. } => "shear",
            AnalyticFlow::LambOseen { .. } => "lamb_oseen",
            AnalyticFlow::Cellular { .. } => "cellular",
        }
    }

    /// Displacement at continuous position `(x, y)` on an `height x width` image.
    pub fn evaluate(&self, x: f64, y: f64, height: usize, width: usize) -> (f64, f64) {
        let default_center = (width as f64 / 2.0, height as f64 / 2.0);
        match *self {
            AnalyticFlow::Uniform { u, v } => (u, v),
            AnalyticFlow::Rotation { omega, center } => {
                let (cx, cy) = center.unwrap_or(default_center);
                (-omega * (y - cy), omega * (x - cx))
            }
            AnalyticFlow::Shear { rate } => (rate * (y - height as f64 / 2.0), 0.0),
            AnalyticFlow::LambOseen { circulation, core_radius, center } => {
                let (cx, cy) = center.unwrap_or(default_center);
                let (dx, dy) = (x - cx, y - cy);
                let r2 = dx * dx + dy * dy;
                if r2 == 0.0 {
                    return (0.0, 0.0);
                }
                // speed / r, so that (u, v) = speed * (-dy, dx) / r
                let k = circulation / (2.0 * PI * r2) * (1.0 - (-r2 / (core_radius * core_radius)).exp());
                (-k * dy, k * dx)
            }
            AnalyticFlow::Cellular { amplitude, wavelength } => {
                let kx = 2.0 * PI * x / wavelength;
                let ky = 2.0 * PI * y / wavelength;
                (amplitude * kx.sin() * ky.cos(), -amplitude * kx.cos() * ky.sin())
            }
        }
    }

    /// Largest displacement magnitude over the pixel centers of the grid.
    pub fn max_displacement(&self, height: usize, width: usize) -> f64 {
        let mut best = 0.0f64;
        for y in 0..height {
            for x in 0..width {
                let (u, v) = self.evaluate(x as f64 + 0.5, y as f64 + 0.5, height, width);
                best = best.max(u.hypot(v));
            }
        }
        best
    }
}

impl fmt::Display for AnalyticFlow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let center = |c: &Option<(f64, f64)>| c.map(|(x, y)| format!(",{x},{y}")).unwrap_or_default();
        match self {
            AnalyticFlow::Uniform { u, v } => write!(f, "uniform:{u},{v}"),
            AnalyticFlow::Rotation { omega, center: c } => write!(f, "rotation:{omega}{}", center(c)),
            AnalyticFlow::Shear { rate } => write!(f, "shear:{rate}"),
            AnalyticFlow::LambOseen { circulation, core_radius, center: c } => {
                write!(f, "lamb_oseen:{circulation},{core_radius}{}", center(c))
            }
            AnalyticFlow::Cellular { amplitude, wavelength } => write!(f, "cellular:{amplitude},{wavelength}"),
        }
    }
}

/// Parses `kind[:p1,p2,...]`. A bare kind uses moderate defaults.
impl FromStr for AnalyticFlow {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SynthError::BadFlowSpec(s.to_string());
        let (kind, params) = match s.split_once(':') {
            Some((k, p)) => (k.trim(), p),
            None => (s.trim(), ""),
        };
        let p: Vec<f64> = if params.trim().is_empty() {
            Vec::new()
        } else {
            params.split(',').map(|x| x.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_, _>>()?
        };
        let center = |rest: &[f64]| match rest {
            [] => Ok(None),
            [x, y] => Ok(Some((*x, *y))),
            _ => Err(bad()),
        };
        match (kind.to_ascii_lowercase().as_str(), p.as_slice()) {
            ("uniform", []) => Ok(AnalyticFlow::Uniform { u: 2.5, v: -1.5 }),
            ("uniform", [u, v]) => Ok(AnalyticFlow::Uniform { u: *u, v: *v }),
            ("rotation", []) => Ok(AnalyticFlow::Rotation { omega: 0.03, center: None }),
            ("rotation", [omega, rest @ ..]) => Ok(AnalyticFlow::Rotation { omega: *omega, center: center(rest)? }),
            ("shear", []) => Ok(AnalyticFlow::Shear { rate: 0.04 }),
            ("shear", [rate]) => Ok(AnalyticFlow::Shear { rate: *rate }),
            ("lamb_oseen" | "vortex", []) => {
                Ok(AnalyticFlow::LambOseen { circulation: 60.0, core_radius: 8.0, center: None })
            }
            ("lamb_oseen" | "vortex", [g, rc, rest @ ..]) => {
                Ok(AnalyticFlow::LambOseen { circulation: *g, core_radius: *rc, center: center(rest)? })
            }
            ("cellular", []) => Ok(AnalyticFlow::Cellular { amplitude: 1.5, wavelength: 64.0 }),
            ("cellular", [a, l]) => Ok(AnalyticFlow::Cellular { amplitude: *a, wavelength: *l }),
            _ => Err(bad()),
        }
    }
}

/// Evaluates `flow` at every pixel center.
pub fn sample_flow(flow: &AnalyticFlow, height: usize, width: usize) -> VelocityField {
    VelocityField::from_fn(height, width, |y, x| {
        let (u, v) = flow.evaluate(x as f64 + 0.5, y as f64 + 0.5, height, width);
        (u as f32, v as f32)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub x: f64,
    pub y: f64,
    pub intensity: f64,
}

/// Renders Gaussian blobs truncated at 4 sigma, clipped to `[0, 1]`.
/// Particles outside the image are skipped.
pub fn render_frame(particles: &[Particle], height: usize, width: usize, sigma: f64, background: f64) -> Frame {
    let mut acc = Array2::from_elem((height, width), background);
    let reach = 4.0 * sigma;
    let reach2 = reach * reach;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for p in particles {
        if !(p.x >= 0.0 && p.x < width as f64 && p.y >= 0.0 && p.y < height as f64) {
            continue;
        }
        let x0 = (p.x - reach - 0.5).floor().max(0.0) as usize;
        let x1 = ((p.x + reach - 0.5).ceil().max(0.0) as usize).min(width - 1);
        let y0 = (p.y - reach - 0.5).floor().max(0.0) as usize;
        let y1 = ((p.y + reach - 0.5).ceil().max(0.0) as usize).min(height - 1);
        for yy in y0..=y1 {
            let dy = yy as f64 + 0.5 - p.y;
            for xx in x0..=x1 {
                let dx = xx as f64 + 0.5 - p.x;
                let d2 = dx * dx + dy * dy;
                if d2 <= reach2 {
                    acc[[yy, xx]] += p.intensity * (-d2 * inv).exp();
                }
            }
        }
    }
    acc.mapv(|v| v.clamp(0.0, 1.0) as f32)
}

pub fn seed_particles(cfg: &GeneratorConfig, rng: &mut impl Rng) -> Vec<Particle> {
    let (lo, hi) = cfg.peak_intensity_range;
    (0..cfg.particle_count())
        .map(|_| Particle {
            x: rng.random::<f64>() * cfg.width as f64,
            y: rng.random::<f64>() * cfg.height as f64,
            intensity: lo + (hi - lo) * rng.random::<f64>(),
        })
        .collect()
}

/// Moves each particle by the flow bilinearly sampled at its position.
pub fn advect(particles: &[Particle], flow: &VelocityField) -> Vec<Particle> {
    particles
        .iter()
        .map(|p| Particle {
            x: p.x + sample_bilinear(flow.u(), p.x, p.y) as f64,
            y: p.y + sample_bilinear(flow.v(), p.x, p.y) as f64,
            intensity: p.intensity,
        })
        .collect()
}

fn add_noise(frame: &mut Frame, std: f64, rng: &mut impl Rng) {
    if std <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("std validated");
    frame.mapv_inplace(|v| (v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32);
}

/// Renders one pair and returns the seeded frame-a particles alongside.
pub fn render_pair_with_particles(
    flow: &VelocityField,
    cfg: &GeneratorConfig,
) -> Result<(FlowSample, Vec<Particle>), SynthError> {
    cfg.validate()?;
    if flow.shape() != (cfg.height, cfg.width) {
        return Err(SynthError::ShapeMismatch { flow: flow.shape(), config: (cfg.height, cfg.width) });
    }
    let n = cfg.particle_count();
    if n < 4 {
        return Err(SynthError::DensityOverflow(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let particles = seed_particles(cfg, &mut rng);
    let moved = advect(&particles, flow);
    let sigma = cfg.particle_diameter_sigma;
    let mut a = render_frame(&particles, cfg.height, cfg.width, sigma, cfg.background_level);
    let mut b = render_frame(&moved, cfg.height, cfg.width, sigma, cfg.background_level);
    add_noise(&mut a, cfg.noise_std, &mut rng);
    add_noise(&mut b, cfg.noise_std, &mut rng);
    let id = format!("synthetic_{}", cfg.rng_seed);
    let sample = FlowSample {
        pair: ImagePair::new(a, b, id.clone())?,
        id,
        gt: Some(flow.clone()),
        case_label: CaseLabel::Unlabeled,
        split: Split::Train,
    };
    Ok((sample, particles))
}

pub fn render_pair(flow: &VelocityField, cfg: &GeneratorConfig) -> Result<FlowSample, SynthError> {
    render_pair_with_particles(flow, cfg).map(|(s, _)| s)
}

/// `per_flow` samples of every flow; sample `i` uses seed `rng_seed + i`.
/// Samples are labelled `Unlabeled`, assigned to the train split and named
/// `<kind>_<index>`.
pub fn make_dataset(
    flows: &[AnalyticFlow],
    per_flow: usize,
    cfg: &GeneratorConfig,
) -> Result<Vec<FlowSample>, SynthError> {
    if per_flow == 0 {
        return Err(SynthError::EmptyRequest);
    }
    cfg.validate()?;
    let jobs: Vec<(usize, &AnalyticFlow)> =
        flows.iter().flat_map(|f| std::iter::repeat_n(f, per_flow)).enumerate().collect();
    jobs.into_par_iter()
        .map(|(i, flow)| {
            let field = sample_flow(flow, cfg.height, cfg.width);
            let sub = GeneratorConfig { rng_seed: cfg.rng_seed.wrapping_add(i as u64), ..cfg.clone() };
            let mut sample = render_pair(&field, &sub)?;
            sample.id = format!("{}_{i:04}", flow.kind());
            sample.pair = ImagePair::new_unchecked(
                sample.pair.frame_a().clone(),
                sample.pair.frame_b().clone(),
                sample.id.clone(),
            );
            Ok(sample)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(h: usize, w: usize) -> GeneratorConfig {
        GeneratorConfig { height: h, width: w, rng_seed: 11, ..GeneratorConfig::default() }
    }

    #[test]
    fn uniform_flow_is_constant() {
        let f = sample_flow(&AnalyticFlow::Uniform { u: 3.25, v: -2.5 }, 32, 32);
        assert!(f.u().iter().all(|&x| x == 3.25));
        assert!(f.v().iter().all(|&x| x == -2.5));
    }

    #[test]
    fn rotation_vanishes_near_center() {
        let f = sample_flow(&AnalyticFlow::Rotation { omega: 0.01, center: None }, 32, 32);
        assert!(f.u()[[16, 16]].abs() < 0.01 && f.v()[[16, 16]].abs() < 0.01);
        let far = f.u()[[0, 16]].hypot(f.v()[[0, 16]]);
        assert!(far > 0.1);
    }

    #[test]
    fn lamb_oseen_tangential_speed() {
        // speeds computed independently: (G / 2 pi r) (1 - exp(-r^2 / rc^2)), G = 50, rc = 4
        let expected = [(2.0, 0.8801237195560592), (4.0, 1.257563894594702), (10.0, 0.7942385088685125)];
        let flow = AnalyticFlow::LambOseen { circulation: 50.0, core_radius: 4.0, center: Some((0.0, 0.0)) };
        for (r, speed) in expected {
            let (u, v) = flow.evaluate(r, 0.0, 64, 64);
            assert!(u.abs() < 1e-12, "purely tangential on the x axis");
            assert!((v - speed).abs() < 1e-6, "r={r}: {v} vs {speed}");
            let (u, v) = flow.evaluate(0.0, r, 64, 64);
            assert!((u + speed).abs() < 1e-6 && v.abs() < 1e-12);
        }
    }

    #[test]
    fn flow_spec_round_trip() {
        for s in ["uniform:3.25,-2.5", "rotation:0.02", "lamb_oseen:40,6,10,12", "cellular:1,32", "shear:0.1"] {
            let f: AnalyticFlow = s.parse().unwrap();
            assert_eq!(f.to_string().parse::<AnalyticFlow>().unwrap(), f);
        }
        assert!("spiral".parse::<AnalyticFlow>().is_err());
        assert!("uniform:1".parse::<AnalyticFlow>().is_err());
    }

    #[test]
    fn zero_flow_renders_identical_frames() {
        let c = cfg(48, 48);
        let s = render_pair(&VelocityField::zeros(48, 48), &c).unwrap();
        assert_eq!(s.pair.frame_a(), s.pair.frame_b());
    }

    #[test]
    fn integer_shift_translates_image() {
        let c = cfg(64, 64);
        let s = render_pair(&VelocityField::constant(64, 64, 3.0, 0.0), &c).unwrap();
        let (a, b) = (s.pair.frame_a(), s.pair.frame_b());
        let border = 3 + 5;
        let mut worst = 0.0f32;
        for y in border..64 - border {
            for x in border..64 - border {
                worst = worst.max((b[[y, x]] - a[[y, x - 3]]).abs());
            }
        }
        assert!(worst < 1e-6, "max diff {worst}");
    }

    #[test]
    fn particle_count_matches_density() {
        let c = cfg(64, 64);
        assert_eq!(c.particle_count(), 205);
        let (_, particles) = render_pair_with_particles(&VelocityField::zeros(64, 64), &c).unwrap();
        assert_eq!(particles.len(), 205);
    }

    #[test]
    fn config_and_shape_errors() {
        let mut c = cfg(16, 16);
        c.particle_density = 0.01;
        assert_eq!(render_pair(&VelocityField::zeros(16, 16), &c), Err(SynthError::DensityOverflow(3)));
        c.particle_density = 0.3;
        assert!(matches!(c.validate(), Err(SynthError::InvalidConfig(_))));
        let c = cfg(32, 32);
        assert!(matches!(render_pair(&VelocityField::zeros(16, 32), &c), Err(SynthError::ShapeMismatch { .. })));
    }

    #[test]
    fn noise_is_seeded() {
        let mut c = cfg(32, 32);
        c.noise_std = 0.05;
        let f = VelocityField::zeros(32, 32);
        let s1 = render_pair(&f, &c).unwrap();
        assert_eq!(s1, render_pair(&f, &c).unwrap());
        assert_ne!(s1.pair.frame_a(), s1.pair.frame_b());
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let flows = vec![AnalyticFlow::Uniform { u: 1.0, v: 0.0 }, AnalyticFlow::Shear { rate: 0.05 }];
        let c = cfg(32, 32);
        let d = make_dataset(&flows, 3, &c).unwrap();
        assert_eq!(d.len(), 6);
        assert_eq!(d[4].id, "shear_0004");
        assert!(d.iter().all(|s| s.case_label == CaseLabel::Unlabeled));
        assert_ne!(d[0].pair.frame_a(), d[1].pair.frame_a(), "distinct seeds");
        assert_eq!(d, make_dataset(&flows, 3, &c).unwrap());
        assert_eq!(make_dataset(&flows, 0, &c), Err(SynthError::EmptyRequest));
    }
}
