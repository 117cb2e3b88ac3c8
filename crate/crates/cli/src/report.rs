//! `report` merges evaluation runs into one table; `plot` renders per-sample
//! panels: ground truth, then prediction and residual for each method.

use std::path::{Path, PathBuf};

use pivdiff_core::figures::{hstack, quiver_figure, residual_figure};
use pivdiff_core::flow_io::ManifestEntry;
use pivdiff_core::metrics::residual_map;
use pivdiff_core::report::{comparison_table, EvalReport};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::eval::{ground_truth, read_predictions};
use crate::{create_dir, CliError};

fn read_report(path: &Path) -> Result<EvalReport, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    EvalReport::from_jsonl(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn require_report(dir: &Path) -> Result<PathBuf, CliError> {
    let p = dir.join("report.jsonl");
    if !p.is_file() {
        return Err(CliError::Input(format!("{} holds no report.jsonl", dir.display())));
    }
    Ok(p)
}

/// Reports of every run directory; a baseline report rides along with its
/// run unless an identical report is already listed.
fn collect(run_dirs: &[PathBuf]) -> Result<Vec<EvalReport>, CliError> {
    let mut reports = Vec::new();
    for dir in run_dirs {
        reports.push(read_report(&require_report(dir)?)?);
        let b = dir.join("baseline.jsonl");
        if b.is_file() {
            let r = read_report(&b)?;
            if !reports.contains(&r) {
                reports.push(r);
            }
        }
    }
    Ok(reports)
}

pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let reports = collect(run_dirs)?;
    let mut text = comparison_table(&reports);
    for r in &reports {
        if let (Some(pct), Some(b)) = (r.reduction_percent(), r.baseline_overall_aee) {
            text.push_str(&format!("{}: AEE reduction vs baseline {pct} ({b:.4} -> {:.4})\n", r.method, r.overall.aee));
        }
    }
    create_dir(out)?;
    let path = out.join("comparison.txt");
    std::fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
    print!("{text}");
    Ok(())
}

struct Method {
    name: String,
    pred_dir: PathBuf,
}

pub fn plot(run_dirs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut methods = Vec::new();
    let mut first_cfg: Option<RunConfig> = None;
    for dir in run_dirs {
        let report = read_report(&require_report(dir)?)?;
        let cfg_path = dir.join("config.toml");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| CliError::io(&cfg_path, e))?;
        let cfg = RunConfig::from_toml(&text)?;
        let pred_dir = cfg
            .eval
            .pred_dir
            .clone()
            .ok_or_else(|| CliError::Input(format!("{} records no prediction directory", cfg_path.display())))?;
        methods.push(Method { name: report.method, pred_dir });
        if let Some(b) = &cfg.eval.baseline_dir {
            if !methods.iter().any(|m| &m.pred_dir == b) {
                methods.push(Method { name: cfg.eval.baseline_method.clone(), pred_dir: b.clone() });
            }
        }
        first_cfg.get_or_insert(cfg);
    }
    let cfg = first_cfg.expect("clap requires at least one run directory");
    let (entries, gts) = ground_truth(&cfg)?;
    let refs: Vec<&ManifestEntry> = entries.iter().collect();
    let preds = methods.iter().map(|m| read_predictions(&m.pred_dir, &refs)).collect::<Result<Vec<_>, _>>()?;
    let stride = cfg.eval.quiver_stride;

    let fig_dir = out.join("figures");
    refs.par_iter().enumerate().try_for_each(|(i, e)| {
        let gt = &gts[i];
        let speed_max = gt
            .u()
            .iter()
            .zip(gt.v())
            .map(|(&u, &v)| (u as f64).hypot(v as f64))
            .filter(|m| m.is_finite())
            .fold(0.0f64, f64::max);
        let residuals =
            preds.iter().map(|p| residual_map(&p[i], gt).map_err(CliError::internal)).collect::<Result<Vec<_>, _>>()?;
        let res_max = residuals.iter().flatten().filter(|v| v.is_finite()).fold(0.0f64, |m, &v| m.max(v as f64));
        let mut panels = vec![quiver_figure(gt, stride, Some(speed_max))];
        for (p, r) in preds.iter().zip(&residuals) {
            panels.push(quiver_figure(&p[i], stride, Some(speed_max)));
            panels.push(residual_figure(r, Some(res_max)));
        }
        let path = fig_dir.join(format!("{}.png", e.id));
        create_dir(path.parent().expect("figure path has a parent"))?;
        hstack(&panels).save_png(&path).map_err(|err| CliError::io(&path, err))
    })?;
    let names: Vec<&str> = methods.iter().map(|m| m.name.as_str()).collect();
    println!(
        "{} figures (ground truth | {}) written to {}",
        refs.len(),
        names.iter().map(|n| format!("{n} + residual")).collect::<Vec<_>>().join(" | "),
        fig_dir.display()
    );
    Ok(())
}
