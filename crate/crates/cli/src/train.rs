use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use pivdiff_core::flow_io::DatasetManifest;
use pivdiff_core::{FlowSample, Split};
use pivdiff_net::train::{train, LogRow, LOG_HEADER};
use pivdiff_net::{remap_checkpoint, Checkpoint, DiffuserNet, NetError};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::{create_dir, load_manifest, CliError};

/// Metadata keys that let `infer` rebuild the network without a config.
pub const MODEL_CONFIG_KEY: &str = "model_config";
pub const SCALE_MAX_KEY: &str = "scale_max";
pub const CLAMP_KEY: &str = "clamp";

pub(crate) fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<FlowSample>, CliError> {
    let entries: Vec<_> = manifest.split(split).collect();
    entries.par_iter().map(|e| manifest.load(e).map_err(CliError::input)).collect()
}

/// `<out>/<name>`, or `<out>/train-<timestamp>` with a numeric suffix if taken.
fn run_dir(out: &Path, name: Option<&str>) -> PathBuf {
    let base = name.map(str::to_string).unwrap_or_else(|| format!("train-{}", chrono::Local::now().format("%Y%m%d-%H%M%S")));
    let mut dir = out.join(&base);
    let mut n = 2;
    while dir.exists() {
        dir = out.join(format!("{base}-{n}"));
        n += 1;
    }
    dir
}

pub fn run(cfg: &mut RunConfig, out: &Path, run_name: Option<&str>) -> Result<PathBuf, CliError> {
    let manifest = load_manifest(cfg)?;
    let train_set = load_split(&manifest, Split::Train)?;
    let val_set = load_split(&manifest, Split::Val)?;
    let schedule = cfg.diffusion.schedule()?;
    let model = DiffuserNet::new(cfg.model.clone(), cfg.diffusion.normalizer()?, cfg.train.seed, cfg.runtime.dtype())
        .map_err(CliError::input)?;

    let dir = run_dir(out, run_name);
    create_dir(&dir.join("checkpoints"))?;
    if let Some(src) = &cfg.init_from {
        let ck = Checkpoint::load(src).map_err(|e| CliError::Input(format!("{}: {e}", src.display())))?;
        let audit = remap_checkpoint(&ck, model.params()).map_err(CliError::input)?;
        print!("{audit}");
        println!(
            "init from {}: loaded {}, skipped {}, missing {}",
            src.display(),
            audit.loaded_count(),
            audit.skipped.len(),
            audit.missing.len()
        );
        let p = dir.join("init_audit.txt");
        std::fs::write(&p, audit.to_string()).map_err(|e| CliError::io(&p, e))?;
    }
    cfg.write(&dir)?;
    println!("run directory {}", dir.display());
    println!(
        "training on {} samples ({} validation), {} parameters",
        train_set.len(),
        val_set.len(),
        model.params().element_count()
    );

    let log_path = dir.join("train_log.tsv");
    let mut log = File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    writeln!(log, "{LOG_HEADER}").map_err(|e| CliError::io(&log_path, e))?;
    let report_every = (cfg.train.total_steps / 20).max(1);
    let mut write_err = None;
    let on_row = |row: &LogRow| {
        if let Err(e) = writeln!(log, "{}", row.to_line()) {
            write_err.get_or_insert(e);
        }
        if row.step % report_every == 0 || row.val_aee.is_some() {
            let val = row.val_aee.map(|v| format!("  val AEE {v:.4}")).unwrap_or_default();
            println!("step {:>6}  loss {:.5}  lr {:.3e}{val}", row.step, row.loss, row.lr);
        }
    };
    let result = train(&model, &train_set, &val_set, &schedule, &cfg.train, Some(&dir.join("checkpoints")), on_row);
    if let Some(e) = write_err {
        return Err(CliError::io(&log_path, e));
    }
    let outcome = match result {
        Ok(o) => o,
        Err(NetError::NonFiniteLoss { step, batch_ids }) => {
            let diag = dir.join("failure.txt");
            let text = format!("non-finite loss at step {step}\nbatch:\n{}\n", batch_ids.join("\n"));
            std::fs::write(&diag, text).map_err(|e| CliError::io(&diag, e))?;
            return Err(CliError::Training(format!(
                "training diverged at step {step}; diagnostics in {}",
                diag.display()
            )));
        }
        Err(e @ NetError::Precondition(_)) => return Err(CliError::input(e)),
        Err(e) => return Err(CliError::internal(e)),
    };

    let last = outcome.checkpoints.last().ok_or_else(|| CliError::Internal("no checkpoint written".into()))?;
    let mut ck = Checkpoint::load(last).map_err(CliError::internal)?;
    ck.metadata.insert(MODEL_CONFIG_KEY.into(), toml::to_string(&cfg.model).expect("model config serializes"));
    ck.metadata.insert(SCALE_MAX_KEY.into(), cfg.diffusion.scale_max.to_string());
    ck.metadata.insert(CLAMP_KEY.into(), cfg.diffusion.clamp.to_string());
    let final_path = dir.join("final.safetensors");
    ck.save(&final_path).map_err(CliError::internal)?;
    println!("final checkpoint {}", final_path.display());
    Ok(dir)
}
