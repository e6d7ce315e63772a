//! Aggregation of run reports into CSV tables and SVG plots.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluation::{Protocol, RunReport, BUCKET_NAMES};

use super::svg::{grouped_bar_chart, Series};

/// Metric columns of the summary, in order.
pub const SUMMARY_METRICS: [&str; 11] = [
    "average_accuracy",
    "worst_domain_accuracy",
    "overall_accuracy",
    "macro_f1",
    "bucket_XL",
    "bucket_L",
    "bucket_M",
    "bucket_S",
    "bucket_XS",
    "i_acc",
    "i_kl",
];

pub fn metric(report: &RunReport, name: &str) -> Option<f64> {
    let m = &report.metrics;
    match name {
        "average_accuracy" => Some(m.average_accuracy),
        "worst_domain_accuracy" => Some(m.worst_domain_accuracy),
        "overall_accuracy" => Some(m.overall_accuracy),
        "macro_f1" => Some(m.macro_f1),
        "i_acc" => report.invariance_acc,
        "i_kl" => report.invariance_kl,
        other => {
            let bucket = other.strip_prefix("bucket_")?;
            m.buckets.iter().find(|b| b.name == bucket).and_then(|b| b.accuracy)
        }
    }
}

/// Mean and sample standard deviation (`n - 1` denominator; `None` for a
/// single value).
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub name: &'static str,
    pub count: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub protocol: Protocol,
    pub method: String,
    pub runs: usize,
    pub metrics: Vec<MetricSummary>,
}

impl SummaryRow {
    pub fn get(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

fn sort_key(r: &RunReport) -> (&'static str, String, u64) {
    (r.protocol.name(), r.method.clone(), r.seed)
}

/// Reports sorted by (protocol, method, seed).
pub fn sorted(mut reports: Vec<RunReport>) -> Vec<RunReport> {
    reports.sort_by(|a, b| sort_key(a).cmp(&sort_key(b)));
    reports
}

/// One row per (protocol, method) group, in sorted order.
pub fn summarize(reports: &[RunReport]) -> Vec<SummaryRow> {
    let reports = sorted(reports.to_vec());
    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut start = 0;
    while start < reports.len() {
        let (p, m) = (reports[start].protocol, reports[start].method.clone());
        let end = start + reports[start..].iter().take_while(|r| r.protocol == p && r.method == m).count();
        let group = &reports[start..end];
        let metrics = SUMMARY_METRICS
            .iter()
            .map(|name| {
                let values: Vec<f64> = group.iter().filter_map(|r| metric(r, name)).collect();
                let (mean, std) = mean_std(&values);
                MetricSummary {
                    name,
                    count: values.len(),
                    mean,
                    std,
                }
            })
            .collect();
        rows.push(SummaryRow {
            protocol: p,
            method: m,
            runs: group.len(),
            metrics,
        });
        start = end;
    }
    rows
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn runs_csv(reports: &[RunReport]) -> String {
    let mut out = RunReport::csv_header();
    out.push('\n');
    for r in sorted(reports.to_vec()) {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut header = vec!["protocol".to_string(), "method".to_string(), "runs".to_string()];
    for m in SUMMARY_METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let mut cells = vec![row.protocol.name().to_string(), row.method.clone(), row.runs.to_string()];
        for m in &row.metrics {
            cells.push(cell(m.mean));
            cells.push(cell(m.std));
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn series_for(rows: &[&SummaryRow], metrics: &[&str]) -> Vec<Series> {
    rows.iter()
        .map(|row| Series {
            name: row.method.clone(),
            values: metrics.iter().map(|m| row.get(m).and_then(|s| s.mean)).collect(),
            errors: metrics.iter().map(|m| row.get(m).and_then(|s| s.std)).collect(),
        })
        .collect()
}

/// Mean accuracy per class-size bucket, one series per method.
pub fn bucket_plot(rows: &[SummaryRow], protocol: Protocol) -> String {
    let group: Vec<&SummaryRow> = rows.iter().filter(|r| r.protocol == protocol).collect();
    let metrics: Vec<String> = BUCKET_NAMES.iter().map(|b| format!("bucket_{b}")).collect();
    let names: Vec<&str> = metrics.iter().map(String::as_str).collect();
    let cats: Vec<String> = BUCKET_NAMES.iter().map(|b| b.to_string()).collect();
    grouped_bar_chart(
        &format!("Accuracy by class-size bucket ({protocol})"),
        "accuracy",
        &cats,
        &series_for(&group, &names),
    )
}

/// `I_acc` and `I_kl` per method.
pub fn invariance_plot(rows: &[SummaryRow]) -> String {
    let group: Vec<&SummaryRow> = rows.iter().filter(|r| r.protocol == Protocol::Subpopulation).collect();
    grouped_bar_chart(
        "Domain invariance (lower is more invariant)",
        "value",
        &["I_acc".to_string(), "I_kl".to_string()],
        &series_for(&group, &["i_acc", "i_kl"]),
    )
}

fn collect_into(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let report = path.join("report.json");
    if report.is_file() {
        out.push(report);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for e in entries {
        collect_into(&e, out)?;
    }
    Ok(())
}

/// Load every `report.json` under the given files or directories.
pub fn find_reports(paths: &[PathBuf]) -> Result<Vec<RunReport>> {
    let mut files = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        collect_into(p, &mut files)?;
    }
    files.sort();
    files.dedup();
    files
        .iter()
        .map(|f| {
            let text = fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
            RunReport::from_json(&text)
        })
        .collect()
}

/// Write `runs.csv`, `summary.csv`, `buckets_<protocol>.svg` and
/// `invariance.svg` into `out`.
pub fn write_report(reports: &[RunReport], out: &Path) -> Result<Vec<SummaryRow>> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to aggregate".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rows = summarize(reports);
    let put = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    put("runs.csv", runs_csv(reports))?;
    put("summary.csv", summary_csv(&rows))?;
    for protocol in [Protocol::Subpopulation, Protocol::DomainShift] {
        if rows.iter().any(|r| r.protocol == protocol) {
            put(&format!("buckets_{protocol}.svg"), bucket_plot(&rows, protocol))?;
        }
    }
    if rows.iter().any(|r| r.protocol == Protocol::Subpopulation) {
        put("invariance.svg", invariance_plot(&rows))?;
    }
    Ok(rows)
}
