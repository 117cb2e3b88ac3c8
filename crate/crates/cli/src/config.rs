//! Run configuration: a TOML file, `--set key=value` overrides and flag
//! shorthands, resolved into one struct and written into every run directory.

use std::path::{Path, PathBuf};

use candle_core::DType;
use pivdiff_core::diffusion::{DiffusionSchedule, FlowNormalizer, NoiseSchedule};
use pivdiff_core::flow_io::BitDepth;
use pivdiff_core::metrics::MetricOptions;
use pivdiff_core::report::Aggregation;
use pivdiff_core::synth::{AnalyticFlow, GeneratorConfig};
use pivdiff_core::types::INVALID_FLOW_THRESHOLD;
use pivdiff_core::xcorr::{SubpixelFit, WidimConfig};
use pivdiff_core::Split;
use pivdiff_net::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Weights fine-tuning starts from, matched through the remap rules.
    pub init_from: Option<PathBuf>,
    pub model: ModelConfig,
    pub diffusion: DiffusionSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub infer: InferSection,
    pub baseline: BaselineSection,
    pub eval: EvalSection,
    pub runtime: RuntimeSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    /// Training noise levels.
    #[serde(rename = "T")]
    pub t: usize,
    pub schedule: ScheduleKind,
    /// Only read by the linear schedule.
    pub beta_start: f64,
    pub beta_end: f64,
    pub inference_steps: usize,
    /// 0 is deterministic DDIM.
    pub eta: f64,
    /// Pixels per frame mapped to normalized 1.0.
    pub scale_max: f64,
    pub clamp: bool,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            t: 1000,
            schedule: ScheduleKind::Cosine,
            beta_start: 1e-4,
            beta_end: 0.02,
            inference_steps: 6,
            eta: 0.0,
            scale_max: 16.0,
            clamp: true,
        }
    }
}

impl DiffusionSection {
    pub fn schedule(&self) -> Result<DiffusionSchedule, CliError> {
        let kind = match self.schedule {
            ScheduleKind::Cosine => NoiseSchedule::Cosine,
            ScheduleKind::Linear => NoiseSchedule::Linear { beta_start: self.beta_start, beta_end: self.beta_end },
        };
        DiffusionSchedule::new(self.t, kind, self.inference_steps, self.eta).map_err(CliError::input)
    }

    pub fn normalizer(&self) -> Result<FlowNormalizer, CliError> {
        FlowNormalizer::new(self.scale_max, self.clamp).map_err(CliError::input)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset manifest read by train, infer, baseline and eval.
    pub manifest: Option<PathBuf>,
    /// Split processed by infer, baseline and eval.
    pub split: Split,
    pub split_seed: u64,
    pub synth: SynthSection,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { manifest: None, split: Split::Test, split_seed: 0, synth: SynthSection::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// `kind[:p1,p2,...]` specs, one case directory per kind.
    pub flows: Vec<String>,
    pub per_flow: usize,
    pub height: usize,
    pub width: usize,
    pub particle_density: f64,
    pub particle_diameter_sigma: f64,
    pub peak_intensity_min: f64,
    pub peak_intensity_max: f64,
    pub noise_std: f64,
    pub background_level: f64,
    pub seed: u64,
    /// 8 or 16.
    pub bit_depth: u8,
}

impl Default for SynthSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            flows: vec!["uniform".into(), "rotation".into()],
            per_flow: 4,
            height: g.height,
            width: g.width,
            particle_density: g.particle_density,
            particle_diameter_sigma: g.particle_diameter_sigma,
            peak_intensity_min: g.peak_intensity_range.0,
            peak_intensity_max: g.peak_intensity_range.1,
            noise_std: g.noise_std,
            background_level: g.background_level,
            seed: g.rng_seed,
            bit_depth: 16,
        }
    }
}

impl SynthSection {
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            height: self.height,
            width: self.width,
            particle_density: self.particle_density,
            particle_diameter_sigma: self.particle_diameter_sigma,
            peak_intensity_range: (self.peak_intensity_min, self.peak_intensity_max),
            noise_std: self.noise_std,
            background_level: self.background_level,
            rng_seed: self.seed,
        }
    }

    pub fn flows(&self) -> Result<Vec<AnalyticFlow>, CliError> {
        self.flows.iter().map(|s| s.parse().map_err(CliError::input)).collect()
    }

    pub fn depth(&self) -> Result<BitDepth, CliError> {
        match self.bit_depth {
            8 => Ok(BitDepth::Eight),
            16 => Ok(BitDepth::Sixteen),
            d => Err(CliError::Input(format!("data.synth.bit_depth must be 8 or 16, got {d}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    pub checkpoint: Option<PathBuf>,
    /// Seeds the initial noise; each sample draws from its own stream.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub window_sizes: Vec<usize>,
    pub overlap_fraction: f64,
    pub outlier_threshold: f64,
    pub median_epsilon: f64,
    pub final_refinements: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let w = WidimConfig::default();
        Self {
            window_sizes: w.window_sizes,
            overlap_fraction: w.overlap_fraction,
            outlier_threshold: w.outlier_threshold,
            median_epsilon: w.median_epsilon,
            final_refinements: w.final_refinements,
        }
    }
}

impl BaselineSection {
    pub fn widim(&self) -> WidimConfig {
        WidimConfig {
            window_sizes: self.window_sizes.clone(),
            overlap_fraction: self.overlap_fraction,
            subpixel_fit: SubpixelFit::Gaussian3Point,
            outlier_threshold: self.outlier_threshold,
            median_epsilon: self.median_epsilon,
            final_refinements: self.final_refinements,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Prediction directory (or run directory holding `pred/`).
    pub pred_dir: Option<PathBuf>,
    pub baseline_dir: Option<PathBuf>,
    pub method: String,
    pub baseline_method: String,
    pub aggregation: Aggregation,
    pub border_crop: usize,
    pub aae_epsilon: f64,
    /// Vector subsampling stride of quiver figures, in pixels.
    pub quiver_stride: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            pred_dir: None,
            baseline_dir: None,
            method: "ours".into(),
            baseline_method: "WIDIM".into(),
            aggregation: Aggregation::SampleMean,
            border_crop: 0,
            aae_epsilon: MetricOptions::default().aae_epsilon,
            quiver_stride: 8,
        }
    }
}

impl EvalSection {
    pub fn metric_options(&self) -> MetricOptions {
        MetricOptions {
            aae_epsilon: self.aae_epsilon,
            invalid_value_threshold: INVALID_FLOW_THRESHOLD as f64,
            border_crop: self.border_crop,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeSection {
    /// Worker threads; 0 picks one per core.
    pub threads: usize,
    pub precision: Precision,
}

impl Default for RuntimeSection {
    fn default() -> Self {
        Self { threads: 0, precision: Precision::F32 }
    }
}

impl RuntimeSection {
    pub fn dtype(&self) -> DType {
        match self.precision {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Parses the right-hand side of `--set` as a TOML value; bare words fall
/// back to strings so `--set data.split=val` works unquoted.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key parsed above"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Writes `value` at the dotted `path`, creating intermediate tables.
pub fn set_path(root: &mut toml::Table, path: &str, value: toml::Value) -> Result<(), CliError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Usage(format!("bad override key '{path}'")));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut table = root;
    for k in parents {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override '{path}': '{k}' is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// File contents (if any) with `key=value` overrides applied on top.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Input(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override '{o}' is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self, CliError> {
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Input(format!("config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Input(format!("config: {e}")))
    }

    /// One seed for every stochastic stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.synth.seed = seed;
        self.train.seed = seed;
        self.infer.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(CliError::input)?;
        self.diffusion.schedule()?;
        self.diffusion.normalizer()?;
        self.train.validate().map_err(CliError::input)?;
        self.data.synth.depth()?;
        self.baseline.widim().validate().map_err(CliError::input)?;
        if self.eval.quiver_stride == 0 {
            return Err(CliError::Input("eval.quiver_stride must be positive".into()));
        }
        Ok(())
    }
}
