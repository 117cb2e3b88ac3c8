//! Shared domain vocabulary: image pairs, velocity fields, labelled samples.
//!
//! Flow fields follow the image-coordinate convention: `u` is positive
//! towards increasing column index, `v` positive towards increasing row index.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Single-channel intensity raster, values in `[0, 1]`.
pub type Frame = Array2<f32>;

/// Smallest interrogable image side.
pub const MIN_IMAGE_SIDE: usize = 16;

/// Flow components whose magnitude exceeds this are "unknown flow" markers.
pub const INVALID_FLOW_THRESHOLD: f32 = 1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TypeError {
    #[error("frame shape mismatch: {a:?} vs {b:?}")]
    FrameShapeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("image {0}x{1} is smaller than the {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE} minimum")]
    ImageTooSmall(usize, usize),
    #[error("intensity outside [0,1] or non-finite")]
    IntensityOutOfRange,
    #[error("flow component shape mismatch: u {u:?} vs v {v:?}")]
    ComponentShapeMismatch { u: (usize, usize), v: (usize, usize) },
    #[error("unsupported coordinate scale {0}")]
    CoordinateScale(f32),
    #[error("unknown case label '{0}'")]
    UnknownCase(String),
    #[error("unknown split '{0}'")]
    UnknownSplit(String),
}

fn dims(a: &Array2<f32>) -> (usize, usize) {
    a.dim()
}

/// Two co-registered frames of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    frame_a: Frame,
    frame_b: Frame,
    source_id: String,
}

impl ImagePair {
    /// Builds a pair, enforcing every invariant.
    pub fn new(frame_a: Frame, frame_b: Frame, source_id: impl Into<String>) -> Result<Self, TypeError> {
        let pair = Self::new_unchecked(frame_a, frame_b, source_id);
        if pair.frame_a.dim() != pair.frame_b.dim() {
            return Err(TypeError::FrameShapeMismatch { a: dims(&pair.frame_a), b: dims(&pair.frame_b) });
        }
        let (h, w) = pair.frame_a.dim();
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(TypeError::ImageTooSmall(h, w));
        }
        if !intensities_ok(&pair.frame_a) || !intensities_ok(&pair.frame_b) {
            return Err(TypeError::IntensityOutOfRange);
        }
        Ok(pair)
    }

    /// Builds a pair without checks; use [`validate_sample`] to inspect it.
    pub fn new_unchecked(frame_a: Frame, frame_b: Frame, source_id: impl Into<String>) -> Self {
        Self { frame_a, frame_b, source_id: source_id.into() }
    }

    pub fn frame_a(&self) -> &Frame {
        &self.frame_a
    }

    pub fn frame_b(&self) -> &Frame {
        &self.frame_b
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn height(&self) -> usize {
        self.frame_a.nrows()
    }

    pub fn width(&self) -> usize {
        self.frame_a.ncols()
    }

    fn violations(&self, out: &mut Vec<String>) {
        if self.frame_a.dim() != self.frame_b.dim() {
            out.push("frame shape mismatch".to_string());
        }
        let (h, w) = self.frame_a.dim();
        let (hb, wb) = self.frame_b.dim();
        if h.min(hb) < MIN_IMAGE_SIDE || w.min(wb) < MIN_IMAGE_SIDE {
            out.push("image smaller than minimum interrogable size".to_string());
        }
        if self.frame_a.iter().chain(self.frame_b.iter()).any(|x| !x.is_finite()) {
            out.push("non-finite intensity".to_string());
        } else if !intensities_ok(&self.frame_a) || !intensities_ok(&self.frame_b) {
            out.push("intensity outside [0,1]".to_string());
        }
    }
}

fn intensities_ok(frame: &Frame) -> bool {
    frame.iter().all(|&x| x.is_finite() && (0.0..=1.0).contains(&x))
}

/// Dense two-component displacement field in pixels per frame.
///
/// Equality is bit-exact on both components and on the coordinate scale.
#[derive(Debug, Clone)]
pub struct VelocityField {
    u: Array2<f32>,
    v: Array2<f32>,
    coordinate_scale: f32,
}

impl VelocityField {
    pub fn new(u: Array2<f32>, v: Array2<f32>, coordinate_scale: f32) -> Result<Self, TypeError> {
        if u.dim() != v.dim() {
            return Err(TypeError::ComponentShapeMismatch { u: u.dim(), v: v.dim() });
        }
        if coordinate_scale != 1.0 && coordinate_scale != 2.0 {
            return Err(TypeError::CoordinateScale(coordinate_scale));
        }
        Ok(Self { u, v, coordinate_scale })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        Self {
            u: Array2::from_elem((height, width), u),
            v: Array2::from_elem((height, width), v),
            coordinate_scale: 1.0,
        }
    }

    /// Evaluates `f(row, col) -> (u, v)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let mut u = Array2::zeros((height, width));
        let mut v = Array2::zeros((height, width));
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(y, x);
                u[[y, x]] = a;
                v[[y, x]] = b;
            }
        }
        Self { u, v, coordinate_scale: 1.0 }
    }

    pub fn u(&self) -> &Array2<f32> {
        &self.u
    }

    pub fn v(&self) -> &Array2<f32> {
        &self.v
    }

    pub fn height(&self) -> usize {
        self.u.nrows()
    }

    pub fn width(&self) -> usize {
        self.u.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.u.dim()
    }

    pub fn coordinate_scale(&self) -> f32 {
        self.coordinate_scale
    }

    pub fn with_coordinate_scale(mut self, scale: f32) -> Result<Self, TypeError> {
        if scale != 1.0 && scale != 2.0 {
            return Err(TypeError::CoordinateScale(scale));
        }
        self.coordinate_scale = scale;
        Ok(self)
    }

    pub fn into_components(self) -> (Array2<f32>, Array2<f32>) {
        (self.u, self.v)
    }

    /// Applies `f` to every scalar of both components.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { u: self.u.mapv(&f), v: self.v.mapv(&f), coordinate_scale: self.coordinate_scale }
    }

    /// True where the vector is usable: finite and not an unknown-flow marker.
    pub fn valid_mask(&self) -> Array2<bool> {
        let mut mask = Array2::from_elem(self.shape(), true);
        ndarray::Zip::from(&mut mask).and(&self.u).and(&self.v).for_each(|m, &a, &b| {
            *m = is_valid_component(a) && is_valid_component(b);
        });
        mask
    }

    pub fn non_finite_count(&self) -> usize {
        self.u.iter().chain(self.v.iter()).filter(|x| !x.is_finite()).count()
    }

    pub fn mean(&self) -> (f64, f64) {
        let n = (self.height() * self.width()).max(1) as f64;
        (
            self.u.iter().map(|&x| x as f64).sum::<f64>() / n,
            self.v.iter().map(|&x| x as f64).sum::<f64>() / n,
        )
    }
}

/// A component counts as valid if finite and below the unknown-flow marker.
pub fn is_valid_component(x: f32) -> bool {
    x.is_finite() && x.abs() <= INVALID_FLOW_THRESHOLD
}

impl PartialEq for VelocityField {
    fn eq(&self, other: &Self) -> bool {
        self.coordinate_scale.to_bits() == other.coordinate_scale.to_bits()
            && self.u.dim() == other.u.dim()
            && self.u.iter().zip(other.u.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
            && self.v.iter().zip(other.v.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Flow-case taxonomy of the benchmark datasets, plus `Unlabeled` for
/// generated or experimental recordings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CaseLabel {
    Backstep,
    #[serde(rename = "JHTDB")]
    Jhtdb,
    #[serde(rename = "DNS-Turbulence")]
    DnsTurbulence,
    Cylinder,
    #[serde(rename = "SQG")]
    Sqg,
    Uniform,
    Other,
    Unlabeled,
}

impl CaseLabel {
    pub const ALL: [CaseLabel; 8] = [
        CaseLabel::Backstep,
        CaseLabel::Jhtdb,
        CaseLabel::DnsTurbulence,
        CaseLabel::Cylinder,
        CaseLabel::Sqg,
        CaseLabel::Uniform,
        CaseLabel::Other,
        CaseLabel::Unlabeled,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CaseLabel::Backstep => "Backstep",
            CaseLabel::Jhtdb => "JHTDB",
            CaseLabel::DnsTurbulence => "DNS-Turbulence",
            CaseLabel::Cylinder => "Cylinder",
            CaseLabel::Sqg => "SQG",
            CaseLabel::Uniform => "Uniform",
            CaseLabel::Other => "Other",
            CaseLabel::Unlabeled => "Unlabeled",
        }
    }

    /// Maps a dataset directory name onto a label; unknown names become `Other`.
    pub fn from_dir_name(name: &str) -> Self {
        name.parse().unwrap_or(CaseLabel::Other)
    }
}

impl fmt::Display for CaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CaseLabel {
    type Err = TypeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        let label = match key.as_str() {
            "backstep" => CaseLabel::Backstep,
            "jhtdb" => CaseLabel::Jhtdb,
            "dnsturbulence" => CaseLabel::DnsTurbulence,
            "cylinder" => CaseLabel::Cylinder,
            "sqg" => CaseLabel::Sqg,
            "uniform" => CaseLabel::Uniform,
            "other" => CaseLabel::Other,
            "unlabeled" | "unlabelled" => CaseLabel::Unlabeled,
            _ => return Err(TypeError::UnknownCase(s.to_string())),
        };
        Ok(label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = TypeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(TypeError::UnknownSplit(s.to_string())),
        }
    }
}

/// One image pair with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub id: String,
    pub pair: ImagePair,
    pub gt: Option<VelocityField>,
    pub case_label: CaseLabel,
    pub split: Split,
}

/// Lists every violated invariant of `sample`; empty when well-formed.
pub fn validate_sample(sample: &FlowSample) -> Vec<String> {
    let mut out = Vec::new();
    sample.pair.violations(&mut out);
    if let Some(gt) = &sample.gt {
        if gt.u.dim() != gt.v.dim() {
            out.push("flow component shape mismatch".to_string());
        }
        if gt.non_finite_count() > 0 {
            out.push("non-finite flow value".to_string());
        }
        if gt.shape() != sample.pair.frame_a.dim() {
            out.push("ground-truth shape differs from image shape".to_string());
        }
        if gt.coordinate_scale != 1.0 && gt.coordinate_scale != 2.0 {
            out.push("unsupported coordinate scale".to_string());
        }
    }
    out
}
