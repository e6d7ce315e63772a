//! Accuracy metrics, class-size buckets and domain-invariance diagnostics.

pub mod kde;
pub mod logreg;

use std::fmt;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::synthdata::Dataset;
use crate::training::dataset_logits;

pub use logreg::{LogReg, LogRegSettings};

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const BUCKET_NAMES: [&str; 5] = ["XL", "L", "M", "S", "XS"];
/// Minimum samples in a (class, domain) cell for it to enter `I_kl`.
pub const KL_MIN_CELL: usize = 5;
/// Minimum samples per domain for `I_acc`.
pub const ACC_MIN_PER_DOMAIN: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    /// Balanced test set over the training domains.
    #[serde(rename = "subpop", alias = "subpopulation")]
    Subpopulation,
    /// Leave-one-domain-out.
    #[serde(rename = "domainshift", alias = "domain_shift")]
    DomainShift,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Subpopulation => "subpop",
            Protocol::DomainShift => "domainshift",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subpop" | "subpopulation" => Ok(Protocol::Subpopulation),
            "domainshift" | "domain_shift" => Ok(Protocol::DomainShift),
            other => Err(Error::Config(format!("unknown protocol '{other}' (expected subpop or domainshift)"))),
        }
    }
}

/// Unscaled logits of one example with its class and domain.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitSample {
    pub logits: Vec<f64>,
    pub class: usize,
    pub domain: usize,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

pub fn collect_logits(network: &Network, data: &Dataset) -> Result<Vec<LogitSample>> {
    let logits = dataset_logits(network, data)?;
    let k = network.config().num_classes;
    Ok(data
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| LogitSample {
            logits: logits.data()[i * k..(i + 1) * k].to_vec(),
            class: e.y,
            domain: e.d,
        })
        .collect())
}

/// Unweighted mean of per-class F1. A class that is neither present nor
/// predicted scores 0.
pub fn macro_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::InvalidArgument("macro F1 needs equal-length non-empty inputs".into()));
    }
    if num_classes == 0 || predictions.iter().chain(labels).any(|c| *c >= num_classes) {
        return Err(Error::InvalidArgument("class index out of range".into()));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (p, y) in predictions.iter().zip(labels) {
        if p == y {
            tp[*y] += 1;
        } else {
            fp[*p] += 1;
            fn_[*y] += 1;
        }
    }
    let total: f64 = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / num_classes as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub name: String,
    pub classes: Vec<usize>,
    /// Mean accuracy of the bucket's classes that occur in the test set.
    pub accuracy: Option<f64>,
}

/// Classes ordered by training count (descending, ties by class id) and cut
/// into five contiguous groups XL..XS; the remainder of `C / 5` goes to the
/// smaller-class buckets. With fewer than five classes every class is its
/// own bucket, named `class_<c>`.
pub fn bucket_accuracy(per_class_accuracy: &[Option<f64>], train_counts: &[usize]) -> Result<Vec<Bucket>> {
    let c = per_class_accuracy.len();
    if c == 0 || train_counts.len() != c {
        return Err(Error::InvalidArgument("bucket inputs must be non-empty and of equal length".into()));
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|a, b| train_counts[*b].cmp(&train_counts[*a]).then(a.cmp(b)));
    let mean = |classes: &[usize]| {
        let accs: Vec<f64> = classes.iter().filter_map(|k| per_class_accuracy[*k]).collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    };
    if c < 5 {
        return Ok(order
            .iter()
            .map(|k| Bucket {
                name: format!("class_{k}"),
                classes: vec![*k],
                accuracy: per_class_accuracy[*k],
            })
            .collect());
    }
    let (base, extra) = (c / 5, c % 5);
    let mut start = 0;
    Ok(BUCKET_NAMES
        .iter()
        .enumerate()
        .map(|(b, name)| {
            let size = base + usize::from(b >= 5 - extra);
            let classes = order[start..start + size].to_vec();
            start += size;
            Bucket {
                name: name.to_string(),
                accuracy: mean(&classes),
                classes,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub num_examples: usize,
    pub overall_accuracy: f64,
    /// `None` for domains absent from the evaluated data.
    pub per_domain_accuracy: Vec<Option<f64>>,
    /// Mean over the evaluated domains.
    pub average_accuracy: f64,
    pub worst_domain_accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub macro_f1: f64,
    pub buckets: Vec<Bucket>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Accuracy metrics from predictions. `train_counts[c]` orders the buckets.
pub fn accuracy_metrics(
    predictions: &[usize],
    labels: &[usize],
    domains: &[usize],
    num_classes: usize,
    num_domains: usize,
    train_counts: &[usize],
) -> Result<EvalMetrics> {
    if predictions.is_empty() || predictions.len() != labels.len() || labels.len() != domains.len() {
        return Err(Error::InvalidArgument("metrics need equal-length non-empty inputs".into()));
    }
    if domains.iter().any(|d| *d >= num_domains) {
        return Err(Error::InvalidArgument("domain index out of range".into()));
    }
    let mut dom = vec![(0usize, 0usize); num_domains];
    let mut cls = vec![(0usize, 0usize); num_classes];
    let mut correct = 0;
    for ((p, y), d) in predictions.iter().zip(labels).zip(domains) {
        let hit = usize::from(p == y);
        correct += hit;
        dom[*d].0 += hit;
        dom[*d].1 += 1;
        cls[*y].0 += hit;
        cls[*y].1 += 1;
    }
    let per_domain_accuracy: Vec<Option<f64>> = dom.iter().map(|(h, n)| ratio(*h, *n)).collect();
    let present: Vec<f64> = per_domain_accuracy.iter().flatten().copied().collect();
    let per_class_accuracy: Vec<Option<f64>> = cls.iter().map(|(h, n)| ratio(*h, *n)).collect();
    Ok(EvalMetrics {
        num_examples: predictions.len(),
        overall_accuracy: correct as f64 / predictions.len() as f64,
        average_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        worst_domain_accuracy: present.iter().cloned().fold(f64::INFINITY, f64::min),
        per_domain_accuracy,
        macro_f1: macro_f1(predictions, labels, num_classes)?,
        buckets: bucket_accuracy(&per_class_accuracy, train_counts)?,
        per_class_accuracy,
    })
}

/// Subpopulation test sets must hold the same number of examples in every
/// (class, domain) cell of the domains they cover.
pub fn check_protocol(data: &Dataset, protocol: Protocol) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Protocol("test set is empty".into()));
    }
    if protocol == Protocol::Subpopulation {
        let counts = data.cell_counts();
        let domains: Vec<usize> = (0..data.num_domains).filter(|d| counts.iter().any(|row| row[*d] > 0)).collect();
        let first = counts[0][domains[0]];
        for (c, row) in counts.iter().enumerate() {
            for d in &domains {
                if row[*d] != first {
                    return Err(Error::Protocol(format!(
                        "subpopulation test set is unbalanced: cell (class {c}, domain {d}) has {} examples, expected {first}",
                        row[*d]
                    )));
                }
            }
        }
    }
    Ok(())
}

pub fn predictions(samples: &[LogitSample]) -> Vec<usize> {
    samples.iter().map(|s| argmax(&s.logits)).collect()
}

pub fn metrics_from_samples(samples: &[LogitSample], num_classes: usize, num_domains: usize, train_counts: &[usize]) -> Result<EvalMetrics> {
    let labels: Vec<usize> = samples.iter().map(|s| s.class).collect();
    let domains: Vec<usize> = samples.iter().map(|s| s.domain).collect();
    accuracy_metrics(&predictions(samples), &labels, &domains, num_classes, num_domains, train_counts)
}

/// Argmax accuracy of `network` on `test`.
pub fn evaluate(network: &Network, test: &Dataset, protocol: Protocol, train_counts: &[usize]) -> Result<EvalMetrics> {
    check_protocol(test, protocol)?;
    let samples = collect_logits(network, test)?;
    metrics_from_samples(&samples, test.num_classes, test.num_domains, train_counts)
}

/// Held-out accuracy of a logistic-regression domain probe on the logits.
///
/// Samples are split per domain in their given order: every fifth sample
/// (positions 4, 9, ...) is held out, the rest train the probe.
pub fn invariance_acc(samples: &[LogitSample], num_domains: usize, settings: &LogRegSettings) -> Result<f64> {
    let mut per_domain = vec![0usize; num_domains];
    for s in samples {
        if s.domain >= num_domains {
            return Err(Error::InvalidArgument("domain index out of range".into()));
        }
        per_domain[s.domain] += 1;
    }
    let present: Vec<usize> = (0..num_domains).filter(|d| per_domain[*d] > 0).collect();
    if present.len() < 2 {
        return Err(Error::InvalidArgument("domain probe needs at least two domains".into()));
    }
    if let Some(d) = present.iter().find(|d| per_domain[**d] < ACC_MIN_PER_DOMAIN) {
        return Err(Error::InvalidArgument(format!(
            "domain {d} has {} samples, the probe needs {ACC_MIN_PER_DOMAIN}",
            per_domain[*d]
        )));
    }
    let mut seen = vec![0usize; num_domains];
    let (mut xtr, mut ytr, mut xte, mut yte) = (vec![], vec![], vec![], vec![]);
    for s in samples {
        let k = seen[s.domain];
        seen[s.domain] += 1;
        if k % 5 == 4 {
            xte.push(s.logits.clone());
            yte.push(s.domain);
        } else {
            xtr.push(s.logits.clone());
            ytr.push(s.domain);
        }
    }
    let model = LogReg::fit(&xtr, &ytr, num_domains, settings)?;
    let pred = model.predict(&xte);
    let hits = pred.iter().zip(&yte).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / yte.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub value: f64,
    /// (class, domain) cells that entered the average.
    pub valid_cells: usize,
    pub skipped_cells: Vec<(usize, usize)>,
    /// Number of (class, d, d') terms, including d = d'.
    pub terms: usize,
}

/// Average KL divergence between per-(class, domain) logit distributions:
/// `1 / terms * sum_c sum_{d, d'} KL(P(h^{c,d}) || P(h^{c,d'}))` over cells
/// with at least [`KL_MIN_CELL`] samples. Each KL is the mean over logit
/// coordinates of a 1-D KDE estimate, clamped at zero.
pub fn invariance_kl(samples: &[LogitSample], num_classes: usize, num_domains: usize) -> Result<KlReport> {
    let dim = samples.first().map_or(0, |s| s.logits.len());
    let mut cells: Vec<Vec<Vec<&[f64]>>> = vec![vec![Vec::new(); num_domains]; num_classes];
    for s in samples {
        if s.class >= num_classes || s.domain >= num_domains || s.logits.len() != dim {
            return Err(Error::InvalidArgument("logit sample out of range or ragged".into()));
        }
        cells[s.class][s.domain].push(&s.logits);
    }
    let mut skipped = Vec::new();
    let mut valid: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for c in 0..num_classes {
        for d in 0..num_domains {
            match cells[c][d].len() {
                0 => {}
                n if n < KL_MIN_CELL => skipped.push((c, d)),
                _ => valid[c].push(d),
            }
        }
    }
    if !skipped.is_empty() {
        info!("I_kl: skipping under-populated cells {skipped:?}");
    }
    let terms: usize = valid.iter().map(|v| v.len() * v.len()).sum();
    if terms == 0 || dim == 0 {
        return Err(Error::InvalidArgument("no (class, domain) cell has enough samples for I_kl".into()));
    }
    let column = |c: usize, d: usize, k: usize| -> Vec<f64> { cells[c][d].iter().map(|l| l[k]).collect() };
    let mut total = 0.0;
    for c in 0..num_classes {
        for &d in &valid[c] {
            for &e in &valid[c] {
                if d == e {
                    continue;
                }
                let kl: f64 = (0..dim).map(|k| kde::kl_divergence(&column(c, d, k), &column(c, e, k))).sum::<f64>() / dim as f64;
                total += kl.max(0.0);
            }
        }
    }
    Ok(KlReport {
        value: total / terms as f64,
        valid_cells: valid.iter().map(Vec::len).sum(),
        skipped_cells: skipped,
        terms,
    })
}

/// Estimator settings recorded in every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSettings {
    pub kde: String,
    pub kde_min_cell: usize,
    pub probe_l2: f64,
    pub probe_tolerance: f64,
    pub probe_max_iterations: usize,
    pub probe_split: String,
}

impl Default for DiagnosticSettings {
    fn default() -> Self {
        let lr = LogRegSettings::default();
        DiagnosticSettings {
            kde: "per-coordinate gaussian, silverman bandwidth, leave-one-out".into(),
            kde_min_cell: KL_MIN_CELL,
            probe_l2: lr.l2,
            probe_tolerance: lr.tolerance,
            probe_max_iterations: lr.max_iterations,
            probe_split: "per domain, every fifth sample held out".into(),
        }
    }
}

/// One trained model's evaluation on one protocol, plus the configuration
/// that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub method: String,
    pub protocol: Protocol,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub metrics: EvalMetrics,
    pub invariance_acc: Option<f64>,
    pub invariance_kl: Option<f64>,
    pub diagnostics: DiagnosticSettings,
}

/// SHA-256 (hex) of the compact JSON encoding of `config`.
pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("JSON values always serialize");
    hex::encode(Sha256::digest(bytes))
}

impl RunReport {
    pub fn new(
        method: &str,
        protocol: Protocol,
        seed: u64,
        config: serde_json::Value,
        metrics: EvalMetrics,
        invariance_acc: Option<f64>,
        invariance_kl: Option<f64>,
    ) -> Self {
        RunReport {
            format_version: REPORT_FORMAT_VERSION,
            method: method.to_string(),
            protocol,
            seed,
            config_hash: config_hash(&config),
            config,
            metrics,
            invariance_acc,
            invariance_kl,
            diagnostics: DiagnosticSettings::default(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: RunReport = serde_json::from_str(text)?;
        if report.format_version != REPORT_FORMAT_VERSION {
            return Err(Error::Version {
                expected: REPORT_FORMAT_VERSION,
                found: report.format_version,
            });
        }
        Ok(report)
    }

    pub fn csv_header() -> String {
        let mut cols = vec![
            "method", "protocol", "seed", "average_accuracy", "worst_domain_accuracy", "overall_accuracy", "macro_f1",
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
        cols.extend(BUCKET_NAMES.iter().map(|b| format!("bucket_{b}")));
        cols.extend(["i_acc", "i_kl", "config_hash"].map(String::from));
        cols.join(",")
    }

    /// One CSV row matching [`RunReport::csv_header`]; missing values are empty.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let m = &self.metrics;
        let mut cells = vec![
            self.method.clone(),
            self.protocol.name().to_string(),
            self.seed.to_string(),
            format!("{}", m.average_accuracy),
            format!("{}", m.worst_domain_accuracy),
            format!("{}", m.overall_accuracy),
            format!("{}", m.macro_f1),
        ];
        for name in BUCKET_NAMES {
            cells.push(opt(m.buckets.iter().find(|b| b.name == name).and_then(|b| b.accuracy)));
        }
        cells.push(opt(self.invariance_acc));
        cells.push(opt(self.invariance_kl));
        cells.push(self.config_hash.clone());
        cells.join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn macro_f1_cases() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        // TP=1, FP=1, FN=1 for each class.
        assert_eq!(macro_f1(&[0, 1, 0, 1], &[0, 1, 1, 0], 2).unwrap(), 0.5);
        // Class 2 never occurs: contributes 0.
        assert!((macro_f1(&[0, 1], &[0, 1], 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(macro_f1(&[], &[], 2).is_err());
    }

    #[test]
    fn buckets_with_five_classes_are_singletons() {
        let acc = [Some(0.1), Some(0.2), Some(0.3), Some(0.4), Some(0.5)];
        let b = bucket_accuracy(&acc, &[5, 50, 10, 40, 20]).unwrap();
        let got: Vec<(usize, Option<f64>)> = b.iter().map(|b| (b.classes[0], b.accuracy)).collect();
        assert_eq!(got, vec![(1, Some(0.2)), (3, Some(0.4)), (4, Some(0.5)), (2, Some(0.3)), (0, Some(0.1))]);
    }

    #[test]
    fn remainder_goes_to_small_buckets() {
        let acc = vec![Some(1.0); 7];
        let b = bucket_accuracy(&acc, &[7, 6, 5, 4, 3, 2, 1]).unwrap();
        let sizes: Vec<usize> = b.iter().map(|b| b.classes.len()).collect();
        assert_eq!(sizes, vec![1, 1, 1, 2, 2]);
        let small = bucket_accuracy(&acc[..3], &[1, 3, 2]).unwrap();
        assert_eq!(small.iter().map(|b| b.name.as_str()).collect::<Vec<_>>(), ["class_1", "class_2", "class_0"]);
    }

    #[test]
    fn metrics_on_constant_classifier() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let domains: Vec<usize> = (0..40).map(|i| (i / 4) % 2).collect();
        let m = accuracy_metrics(&vec![0; 40], &labels, &domains, 4, 2, &[4, 3, 2, 1]).unwrap();
        assert_eq!(m.overall_accuracy, 0.25);
        assert_eq!(m.average_accuracy, 0.25);
        assert_eq!(m.per_class_accuracy, vec![Some(1.0), Some(0.0), Some(0.0), Some(0.0)]);
    }

    #[test]
    fn protocol_parsing() {
        assert_eq!("subpop".parse::<Protocol>().unwrap(), Protocol::Subpopulation);
        assert_eq!("domainshift".parse::<Protocol>().unwrap(), Protocol::DomainShift);
        assert!("other".parse::<Protocol>().is_err());
    }

    #[test]
    fn kl_terms_include_diagonal() {
        let mut samples = Vec::new();
        for d in 0..2 {
            for i in 0..6 {
                samples.push(LogitSample {
                    logits: vec![i as f64 + 20.0 * d as f64],
                    class: 0,
                    domain: d,
                });
            }
        }
        samples.push(LogitSample { logits: vec![0.0], class: 1, domain: 0 });
        let r = invariance_kl(&samples, 2, 2).unwrap();
        assert_eq!(r.terms, 4);
        assert_eq!(r.skipped_cells, vec![(1, 0)]);
        assert!(r.value > 0.0);
    }

    #[test]
    fn csv_row_matches_header_width() {
        let m = accuracy_metrics(&[0, 1], &[0, 1], &[0, 0], 2, 1, &[1, 1]).unwrap();
        let r = RunReport::new("erm", Protocol::Subpopulation, 3, serde_json::json!({"a": 1}), m, None, Some(0.1));
        assert_eq!(RunReport::csv_header().split(',').count(), r.csv_row().split(',').count());
        let back = RunReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
