//! Particle image velocimetry toolkit: domain types, flow-file I/O, the
//! synthetic particle-image generator, the WIDIM cross-correlation baseline,
//! flow diffusion primitives and evaluation metrics.

pub mod diffusion;
pub mod figures;
pub mod flow_io;
pub mod metrics;
pub mod report;
pub mod resample;
pub mod synth;
pub mod types;
pub mod xcorr;

pub use types::{validate_sample, CaseLabel, FlowSample, Frame, ImagePair, Split, VelocityField};
