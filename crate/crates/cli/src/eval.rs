use std::path::{Path, PathBuf};

use pivdiff_core::figures::{hstack, residual_figure};
use pivdiff_core::flow_io::{read_flo, ManifestEntry};
use pivdiff_core::metrics::{residual_map, MetricError, MetricOptions};
use pivdiff_core::report::{assemble_report, evaluate_sample, ReportError, SampleRecord};
use pivdiff_core::VelocityField;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::{absolute, create_dir, load_manifest, pred_path, CliError};

/// A run directory holding `pred/` stands for its predictions.
pub(crate) fn resolve_pred_dir(p: &Path) -> PathBuf {
    let inner = p.join("pred");
    if inner.is_dir() {
        inner
    } else {
        p.to_path_buf()
    }
}

/// Predictions of every entry, or the ids with no prediction file.
pub(crate) fn read_predictions(dir: &Path, entries: &[&ManifestEntry]) -> Result<Vec<VelocityField>, CliError> {
    let missing: Vec<&str> =
        entries.iter().filter(|e| !pred_path(dir, &e.id).is_file()).map(|e| e.id.as_str()).collect();
    if !missing.is_empty() {
        return Err(CliError::Mismatch(format!(
            "{} has no prediction for {} sample(s): {}",
            dir.display(),
            missing.len(),
            missing.join(", ")
        )));
    }
    entries.par_iter().map(|e| read_flo(pred_path(dir, &e.id)).map_err(CliError::input)).collect()
}

fn score(
    entries: &[&ManifestEntry],
    preds: &[VelocityField],
    gts: &[VelocityField],
    opts: &MetricOptions,
) -> Result<Vec<SampleRecord>, CliError> {
    entries
        .iter()
        .zip(preds)
        .zip(gts)
        .map(|((e, p), g)| {
            evaluate_sample(&e.id, e.case_label, p, g, opts).map_err(|err| match err {
                ReportError::Metric { source: MetricError::ShapeMismatch(..), .. } => CliError::Mismatch(err.to_string()),
                err => CliError::input(err),
            })
        })
        .collect()
}

pub(crate) fn ground_truth(cfg: &RunConfig) -> Result<(Vec<ManifestEntry>, Vec<VelocityField>), CliError> {
    let manifest = load_manifest(cfg)?;
    let entries: Vec<ManifestEntry> = manifest.split(cfg.data.split).cloned().collect();
    if entries.is_empty() {
        return Err(CliError::Input(format!("the {} split of the manifest is empty", cfg.data.split)));
    }
    let gts = entries
        .par_iter()
        .map(|e| {
            let flow = e.flow.as_ref().ok_or_else(|| CliError::Input(format!("{} has no ground truth", e.id)))?;
            read_flo(manifest.root.join(flow)).map_err(CliError::input)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((entries, gts))
}

/// Scores `pred_dir` (and optionally a baseline) on the configured split;
/// writes `report.{jsonl,txt}`, `baseline.{jsonl,txt}` and residual figures.
pub fn run(cfg: &mut RunConfig, out: &Path) -> Result<(), CliError> {
    let pred_arg = cfg
        .eval
        .pred_dir
        .clone()
        .ok_or_else(|| CliError::Usage("eval needs --pred or eval.pred_dir".into()))?;
    let (entries, gts) = ground_truth(cfg)?;
    let refs: Vec<&ManifestEntry> = entries.iter().collect();
    let opts = cfg.eval.metric_options();

    let pred_dir = resolve_pred_dir(&pred_arg);
    let preds = read_predictions(&pred_dir, &refs)?;
    let base = match &cfg.eval.baseline_dir {
        Some(b) => {
            let dir = resolve_pred_dir(b);
            let p = read_predictions(&dir, &refs)?;
            Some((dir, p))
        }
        None => None,
    };

    let ours = score(&refs, &preds, &gts, &opts)?;
    let base_records = base.as_ref().map(|(_, p)| score(&refs, p, &gts, &opts)).transpose()?;
    let agg = cfg.eval.aggregation;
    let report = assemble_report(&cfg.eval.method, ours, base_records.as_deref(), agg).map_err(|e| match e {
        ReportError::CaseMismatch { .. } => CliError::Mismatch(e.to_string()),
        e => CliError::input(e),
    })?;

    create_dir(out)?;
    cfg.eval.pred_dir = Some(absolute(&pred_dir));
    if let Some((dir, _)) = &base {
        cfg.eval.baseline_dir = Some(absolute(dir));
    }
    if let Some(m) = &cfg.data.manifest {
        cfg.data.manifest = Some(absolute(m));
    }
    cfg.write(out)?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    };
    write("report.jsonl", report.to_jsonl())?;
    write("report.txt", report.to_table())?;
    print!("{}", report.to_table());
    if let Some(records) = base_records {
        let b = assemble_report(&cfg.eval.baseline_method, records, None, agg).map_err(CliError::input)?;
        write("baseline.jsonl", b.to_jsonl())?;
        write("baseline.txt", b.to_table())?;
    }

    let fig_dir = out.join("figures");
    refs.par_iter().enumerate().try_for_each(|(i, e)| {
        let mut maps = vec![residual_map(&preds[i], &gts[i]).map_err(CliError::internal)?];
        if let Some((_, p)) = &base {
            maps.push(residual_map(&p[i], &gts[i]).map_err(CliError::internal)?);
        }
        let max = maps.iter().flatten().filter(|v| v.is_finite()).fold(0.0f64, |m, &v| m.max(v as f64));
        let panels: Vec<_> = maps.iter().map(|m| residual_figure(m, Some(max))).collect();
        let path = fig_dir.join(format!("{}_residual.png", e.id));
        create_dir(path.parent().expect("figure path has a parent"))?;
        hstack(&panels).save_png(&path).map_err(|err| CliError::io(&path, err))
    })?;
    println!("report and {} residual figures written to {}", refs.len(), out.display());
    Ok(())
}
