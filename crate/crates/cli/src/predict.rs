//! `infer` and `baseline`: one `.flo` per input pair plus a timing table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pivdiff_core::flow_io::{read_image, write_flo};
use pivdiff_core::xcorr::{widim_estimate, XcorrError};
use pivdiff_core::{ImagePair, VelocityField};
use pivdiff_net::{estimate, remap_checkpoint, Checkpoint, DiffuserNet, ModelConfig, NetError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::train::{CLAMP_KEY, MODEL_CONFIG_KEY, SCALE_MAX_KEY};
use crate::{absolute, create_dir, load_manifest, pred_path, CliError};

/// One pair to process: prediction id and its two frames on disk.
struct Job {
    id: String,
    img1: PathBuf,
    img2: PathBuf,
}

impl Job {
    fn load(&self) -> Result<ImagePair, CliError> {
        let read = |p: &Path| read_image(p).map_err(CliError::input);
        ImagePair::new(read(&self.img1)?, read(&self.img2)?, self.id.clone())
            .map_err(|e| CliError::Input(format!("{}: {e}", self.id)))
    }
}

fn jobs(cfg: &mut RunConfig, pair: Option<&[PathBuf]>) -> Result<Vec<Job>, CliError> {
    if let Some([a, b]) = pair {
        let stem = a.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "pair".into());
        let id = stem.strip_suffix("_img1").map(str::to_string).unwrap_or(stem);
        return Ok(vec![Job { id, img1: absolute(a), img2: absolute(b) }]);
    }
    let manifest = load_manifest(cfg)?;
    if let Some(m) = &cfg.data.manifest {
        cfg.data.manifest = Some(absolute(m));
    }
    let jobs: Vec<Job> = manifest
        .split(cfg.data.split)
        .map(|e| Job { id: e.id.clone(), img1: manifest.root.join(&e.img1), img2: manifest.root.join(&e.img2) })
        .collect();
    if jobs.is_empty() {
        return Err(CliError::Input(format!("the {} split of the manifest is empty", cfg.data.split)));
    }
    Ok(jobs)
}

fn write_prediction(dir: &Path, id: &str, field: &VelocityField) -> Result<(), CliError> {
    let path = pred_path(dir, id);
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    write_flo(field, &path).map_err(CliError::input)
}

fn write_timing(out: &Path, rows: &[(String, f64)]) -> Result<f64, CliError> {
    let mut text = String::from("id\tseconds\n");
    for (id, s) in rows {
        let _ = writeln!(text, "{id}\t{s:.6}");
    }
    let path = out.join("timing.tsv");
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(rows.iter().map(|r| r.1).sum::<f64>() / rows.len().max(1) as f64)
}

/// Independent noise stream per sample id, so results do not depend on
/// processing order.
fn stream_of(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn load_model(cfg: &mut RunConfig, upsample: Option<usize>) -> Result<DiffuserNet, CliError> {
    let path = cfg
        .infer
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Usage("infer needs --checkpoint or infer.checkpoint".into()))?;
    let ck = Checkpoint::load(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if let Some(text) = ck.metadata.get(MODEL_CONFIG_KEY) {
        cfg.model = toml::from_str::<ModelConfig>(text)
            .map_err(|e| CliError::Input(format!("{}: bad model config: {e}", path.display())))?;
    }
    if let Some(v) = ck.metadata.get(SCALE_MAX_KEY).and_then(|v| v.parse().ok()) {
        cfg.diffusion.scale_max = v;
    }
    if let Some(v) = ck.metadata.get(CLAMP_KEY).and_then(|v| v.parse().ok()) {
        cfg.diffusion.clamp = v;
    }
    if let Some(s) = upsample {
        cfg.model.upsample_factor = s;
    }
    cfg.infer.checkpoint = Some(absolute(&path));
    let model = DiffuserNet::new(cfg.model.clone(), cfg.diffusion.normalizer()?, 0, cfg.runtime.dtype())
        .map_err(CliError::input)?;
    let audit = remap_checkpoint(&ck, model.params()).map_err(CliError::input)?;
    if !audit.missing.is_empty() {
        return Err(CliError::Input(format!("{} does not cover the model:\n{audit}", path.display())));
    }
    Ok(model)
}

pub fn infer(cfg: &mut RunConfig, out: &Path, pair: Option<&[PathBuf]>, upsample: Option<usize>) -> Result<(), CliError> {
    let jobs = jobs(cfg, pair)?;
    let model = load_model(cfg, upsample)?;
    let schedule = cfg.diffusion.schedule()?;
    let pred_dir = out.join("pred");
    create_dir(&pred_dir)?;
    cfg.write(out)?;
    // sequential: per-sample wall time is part of the output
    let mut timing = Vec::with_capacity(jobs.len());
    for job in &jobs {
        let pair = job.load()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.infer.seed);
        rng.set_stream(stream_of(&job.id));
        let t0 = Instant::now();
        let field = estimate(&pair, &model, &schedule, &mut rng).map_err(|e| match e {
            NetError::DimensionNotDivisible { .. } | NetError::Type(_) => CliError::Input(format!("{}: {e}", job.id)),
            e => CliError::Internal(format!("{}: {e}", job.id)),
        })?;
        timing.push((job.id.clone(), t0.elapsed().as_secs_f64()));
        write_prediction(&pred_dir, &job.id, &field)?;
    }
    let mean = write_timing(out, &timing)?;
    println!(
        "wrote {} predictions to {} (x{} wrapper, {} steps); mean inference time {mean:.3} s",
        jobs.len(),
        pred_dir.display(),
        cfg.model.upsample_factor,
        cfg.diffusion.inference_steps
    );
    Ok(())
}

pub fn baseline(cfg: &RunConfig, out: &Path, pair: Option<&[PathBuf]>) -> Result<(), CliError> {
    let mut cfg = cfg.clone();
    let jobs = jobs(&mut cfg, pair)?;
    let widim = cfg.baseline.widim();
    let pred_dir = out.join("pred");
    create_dir(&pred_dir)?;
    cfg.write(out)?;
    let results: Vec<(String, f64, VelocityField)> = jobs
        .par_iter()
        .map(|job| {
            let pair = job.load()?;
            let t0 = Instant::now();
            let field = widim_estimate(&pair, &widim).map_err(|e| match e {
                XcorrError::ImageTooSmall { .. } | XcorrError::InvalidConfig(_) => {
                    CliError::Input(format!("{}: {e}", job.id))
                }
                e => CliError::Internal(format!("{}: {e}", job.id)),
            })?;
            let secs = t0.elapsed().as_secs_f64();
            write_prediction(&pred_dir, &job.id, &field)?;
            Ok((job.id.clone(), secs, field))
        })
        .collect::<Result<_, CliError>>()?;
    let timing: Vec<(String, f64)> = results.iter().map(|(id, s, _)| (id.clone(), *s)).collect();
    let mean_t = write_timing(out, &timing)?;
    let n = results.len() as f64;
    let (mut mu, mut mv, mut speed) = (0.0, 0.0, 0.0);
    for (_, _, f) in &results {
        let (u, v) = f.mean();
        mu += u / n;
        mv += v / n;
        speed += mean_speed(f) / n;
    }
    println!("wrote {} WIDIM predictions to {}; mean time {mean_t:.3} s", results.len(), pred_dir.display());
    println!("mean flow u {mu:.4} v {mv:.4} px/frame, mean |flow| {speed:.4}");
    Ok(())
}

fn mean_speed(f: &VelocityField) -> f64 {
    let (sum, n) = f
        .u()
        .iter()
        .zip(f.v())
        .filter(|(u, v)| u.is_finite() && v.is_finite())
        .fold((0.0, 0usize), |(s, n), (&u, &v)| (s + (u as f64).hypot(v as f64), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
