//! Per-case aggregation, baseline reductions and report serialization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{error_sums, ErrorSums, MetricError, MetricOptions};
use crate::types::{CaseLabel, FlowSample, VelocityField};

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("no results to report")]
    Empty,
    #[error("sample {0} has no ground truth")]
    MissingGroundTruth(String),
    #[error("baseline and evaluated sample sets differ; missing from baseline: {missing_in_baseline:?}, missing from evaluation: {missing_in_ours:?}")]
    CaseMismatch { missing_in_baseline: Vec<String>, missing_in_ours: Vec<String> },
    #[error("sample {id}: {source}")]
    Metric { id: String, source: MetricError },
    #[error("malformed report line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Sample-level metrics averaged with equal weight per sample.
    SampleMean,
    /// Every valid pixel of every sample pooled together.
    PixelPooled,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::SampleMean => "sample-mean",
            Aggregation::PixelPooled => "pixel-pooled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub case: CaseLabel,
    pub aee: f64,
    pub rmse: f64,
    /// Absent when every pixel was excluded from the angular mean.
    pub aae: Option<f64>,
    pub aae_excluded: usize,
    pub sums: ErrorSums,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub aee: f64,
    pub rmse: f64,
    pub aae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub aggregation: Aggregation,
    pub per_sample: Vec<SampleRecord>,
    pub per_case: BTreeMap<CaseLabel, Summary>,
    pub overall: Summary,
    pub baseline_overall_aee: Option<f64>,
    /// `(AEE_base - AEE_ours) / AEE_base`.
    pub reduction_vs_baseline: Option<f64>,
}

pub fn evaluate_sample(
    id: &str,
    case: CaseLabel,
    pred: &VelocityField,
    gt: &VelocityField,
    opts: &MetricOptions,
) -> Result<SampleRecord, ReportError> {
    let wrap = |source| ReportError::Metric { id: id.to_string(), source };
    let sums = error_sums(pred, gt, opts).map_err(wrap)?;
    Ok(SampleRecord {
        id: id.to_string(),
        case,
        aee: sums.aee().map_err(wrap)?,
        rmse: sums.rmse().map_err(wrap)?,
        aae: sums.aae().ok(),
        aae_excluded: sums.angular_excluded,
        sums,
    })
}

fn summarize(records: &[&SampleRecord], aggregation: Aggregation) -> Summary {
    let count = records.len();
    match aggregation {
        Aggregation::SampleMean => {
            let n = count as f64;
            let angles: Vec<f64> = records.iter().filter_map(|r| r.aae).collect();
            Summary {
                count,
                aee: records.iter().map(|r| r.aee).sum::<f64>() / n,
                rmse: records.iter().map(|r| r.rmse).sum::<f64>() / n,
                aae: (!angles.is_empty()).then(|| angles.iter().sum::<f64>() / angles.len() as f64),
            }
        }
        Aggregation::PixelPooled => {
            let mut total = ErrorSums::default();
            for r in records {
                total.merge(&r.sums);
            }
            Summary {
                count,
                aee: total.aee().unwrap_or(0.0),
                rmse: total.rmse().unwrap_or(0.0),
                aae: total.aae().ok(),
            }
        }
    }
}

fn overall_of(records: &[SampleRecord], aggregation: Aggregation) -> Summary {
    summarize(&records.iter().collect::<Vec<_>>(), aggregation)
}

/// Aggregates precomputed sample records, optionally against a baseline
/// covering exactly the same sample ids.
pub fn assemble_report(
    method: &str,
    records: Vec<SampleRecord>,
    baseline: Option<&[SampleRecord]>,
    aggregation: Aggregation,
) -> Result<EvalReport, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut by_case: BTreeMap<CaseLabel, Vec<&SampleRecord>> = BTreeMap::new();
    for r in &records {
        by_case.entry(r.case).or_default().push(r);
    }
    let per_case = by_case.iter().map(|(c, rs)| (*c, summarize(rs, aggregation))).collect();
    let overall = overall_of(&records, aggregation);

    let (baseline_overall_aee, reduction_vs_baseline) = match baseline {
        None => (None, None),
        Some(base) => {
            let ours: BTreeSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
            let theirs: BTreeSet<&str> = base.iter().map(|r| r.id.as_str()).collect();
            if ours != theirs {
                return Err(ReportError::CaseMismatch {
                    missing_in_baseline: ours.difference(&theirs).map(|s| s.to_string()).collect(),
                    missing_in_ours: theirs.difference(&ours).map(|s| s.to_string()).collect(),
                });
            }
            let b = overall_of(base, aggregation).aee;
            (Some(b), Some((b - overall.aee) / b))
        }
    };
    Ok(EvalReport {
        method: method.to_string(),
        aggregation,
        per_sample: records,
        per_case,
        overall,
        baseline_overall_aee,
        reduction_vs_baseline,
    })
}

fn records_for(
    results: &[(&FlowSample, &VelocityField)],
    opts: &MetricOptions,
) -> Result<Vec<SampleRecord>, ReportError> {
    results
        .iter()
        .map(|(sample, pred)| {
            let gt = sample.gt.as_ref().ok_or_else(|| ReportError::MissingGroundTruth(sample.id.clone()))?;
            evaluate_sample(&sample.id, sample.case_label, pred, gt, opts)
        })
        .collect()
}

/// Evaluates predictions against their samples' ground truth.
pub fn build_report(
    method: &str,
    results: &[(&FlowSample, &VelocityField)],
    baseline_results: Option<&[(&FlowSample, &VelocityField)]>,
    opts: &MetricOptions,
    aggregation: Aggregation,
) -> Result<EvalReport, ReportError> {
    let ours = records_for(results, opts)?;
    let base = baseline_results.map(|b| records_for(b, opts)).transpose()?;
    assemble_report(method, ours, base.as_deref(), aggregation)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Line {
    Meta { method: String, aggregation: Aggregation },
    Sample(SampleRecord),
    Case { case: CaseLabel, summary: Summary },
    Overall(Summary),
    Reduction { baseline_aee: f64, ours_aee: f64, fraction: f64, percent: String },
}

impl EvalReport {
    /// Reduction rendered to one decimal, e.g. `59.4%`.
    pub fn reduction_percent(&self) -> Option<String> {
        self.reduction_vs_baseline.map(|r| format!("{:.1}%", r * 100.0))
    }

    /// Human-readable table: one row per case plus the overall row.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Method: {}  (aggregation: {})", self.method, self.aggregation.as_str());
        let _ = writeln!(out, "{:<16} {:>6} {:>10} {:>10} {:>10}", "Case", "Count", "AEE", "RMSE", "AAE(rad)");
        for (case, s) in &self.per_case {
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>10.4} {:>10.4} {:>10}",
                case.as_str(),
                s.count,
                s.aee,
                s.rmse,
                fmt_opt(s.aae)
            );
        }
        let o = &self.overall;
        let _ = writeln!(out, "{:<16} {:>6} {:>10.4} {:>10.4} {:>10}", "Overall", o.count, o.aee, o.rmse, fmt_opt(o.aae));
        if let (Some(base), Some(pct)) = (self.baseline_overall_aee, self.reduction_percent()) {
            let _ = writeln!(
                out,
                "AEE reduction vs baseline: {pct} (baseline {base:.4} -> {:.4})",
                self.overall.aee
            );
        }
        out
    }

    /// Machine-readable JSON-lines form.
    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![Line::Meta { method: self.method.clone(), aggregation: self.aggregation }];
        lines.extend(self.per_sample.iter().cloned().map(Line::Sample));
        lines.extend(self.per_case.iter().map(|(c, s)| Line::Case { case: *c, summary: *s }));
        lines.push(Line::Overall(self.overall));
        if let (Some(b), Some(r), Some(p)) =
            (self.baseline_overall_aee, self.reduction_vs_baseline, self.reduction_percent())
        {
            lines.push(Line::Reduction { baseline_aee: b, ours_aee: self.overall.aee, fraction: r, percent: p });
        }
        lines
            .iter()
            .map(|l| serde_json::to_string(l).expect("report lines serialize") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ReportError> {
        let mut meta = None;
        let mut per_sample = Vec::new();
        let mut per_case = BTreeMap::new();
        let mut overall = None;
        let mut reduction = None;
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line: Line = serde_json::from_str(raw)
                .map_err(|e| ReportError::Malformed { line: i + 1, reason: e.to_string() })?;
            match line {
                Line::Meta { method, aggregation } => meta = Some((method, aggregation)),
                Line::Sample(r) => per_sample.push(r),
                Line::Case { case, summary } => {
                    per_case.insert(case, summary);
                }
                Line::Overall(s) => overall = Some(s),
                Line::Reduction { baseline_aee, fraction, .. } => reduction = Some((baseline_aee, fraction)),
            }
        }
        let missing = |what: &str| ReportError::Malformed { line: 0, reason: format!("no {what} record") };
        let (method, aggregation) = meta.ok_or_else(|| missing("meta"))?;
        Ok(EvalReport {
            method,
            aggregation,
            per_sample,
            per_case,
            overall: overall.ok_or_else(|| missing("overall"))?,
            baseline_overall_aee: reduction.map(|r| r.0),
            reduction_vs_baseline: reduction.map(|r| r.1),
        })
    }
}

/// Side-by-side AEE table: one row per case, one column per method.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let cases: BTreeSet<CaseLabel> = reports.iter().flat_map(|r| r.per_case.keys().copied()).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<16}", "AEE");
    for r in reports {
        let _ = write!(out, " {:>18}", r.method);
    }
    out.push('\n');
    for case in &cases {
        let _ = write!(out, "{:<16}", case.as_str());
        for r in reports {
            let cell = r.per_case.get(case).map(|s| format!("{:.4}", s.aee)).unwrap_or_else(|| "-".into());
            let _ = write!(out, " {cell:>18}");
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<16}", "Overall");
    for r in reports {
        let _ = write!(out, " {:>18.4}", r.overall.aee);
    }
    out.push('\n');
    out
}
