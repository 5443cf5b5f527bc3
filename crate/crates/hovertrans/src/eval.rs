//! Classification metrics: ROC/AUC, thresholded confusion metrics,
//! DeLong's paired AUC test, and per-fold aggregation with BI-RADS
//! subgroup breakdowns.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::BiRads;
use crate::error::{Error, Result};


/// Default operating point on the malignant probability.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// One out-of-fold prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub image_id: String,
    pub fold: usize,
    pub score_malignant: f64,
    pub label: usize,
}

/// Writes a score table CSV (`image_id,fold,score_malignant,label`).
pub fn write_score_table(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::Runtime(format!("score table: {e}")))?;
    w.write_record(["image_id", "fold", "score_malignant", "label"])
        .map_err(|e| Error::Runtime(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.image_id.as_str(),
            &r.fold.to_string(),
            &format!("{:.17}", r.score_malignant),
            &r.label.to_string(),
        ])
        .map_err(|e| Error::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Runtime(e.to_string()))?;
    Ok(())
}

pub fn read_score_table(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Ingestion(format!("cannot open score table: {e}")))?;
    let mut rows = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Ingestion(e.to_string()))?;
        let field = |idx: usize, name: &str| {
            row.get(idx)
                .map(str::to_string)
                .ok_or_else(|| Error::Validation(format!("score row {}: missing {name}", i + 2)))
        };
        rows.push(ScoreRow {
            image_id: field(0, "image_id")?,
            fold: field(1, "fold")?
                .parse()
                .map_err(|_| Error::Validation(format!("score row {}: bad fold", i + 2)))?,
            score_malignant: field(2, "score_malignant")?
                .parse()
                .map_err(|_| Error::Validation(format!("score row {}: bad score", i + 2)))?,
            label: field(3, "label")?
                .parse()
                .map_err(|_| Error::Validation(format!("score row {}: bad label", i + 2)))?,
        });
    }
    Ok(rows)
}

/// Area under the ROC curve as the Mann-Whitney statistic
/// `P(score+ > score-) + 0.5 * P(tie)`, computed with midranks.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Validation("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both classes present".into(),
        ));
    }
    let ranks = midranks(scores);
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// 1-based midranks (ties share the average of their rank range).
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite scores"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Thresholded binary metrics with malignant as the positive class.
/// A metric whose denominator is empty is reported as `None`, never as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub acc: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Counts the 2x2 table at `threshold` (predicted positive when
/// `score >= threshold`) and derives ACC, specificity `TN/(TN+FP)`,
/// precision `TP/(TP+FP)`, recall `TP/(TP+FN)`, and F1.
pub fn confusion_metrics(scores: &[f64], labels: &[usize], threshold: f64) -> Result<ConfusionMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::Validation("scores and labels differ in length".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Validation(format!("threshold {threshold} outside [0,1]")));
    }
    let (mut tp, mut fp, mut tn, mut fnn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fnn += 1,
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fnn);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Ok(ConfusionMetrics {
        acc: ratio(tp + tn, tp + fp + tn + fnn),
        specificity: ratio(tn, tn + fp),
        precision,
        recall,
        f1,
    })
}

/// DeLong comparison of two correlated AUCs over the same labels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DeLongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Placement values of one score set: per-positive and per-negative means
/// of the tie-aware indicator.
fn placements(scores: &[f64], labels: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();
    let psi = |a: f64, b: f64| {
        if a > b {
            1.0
        } else if a == b {
            0.5
        } else {
            0.0
        }
    };
    let v10: Vec<f64> = pos
        .iter()
        .map(|&x| neg.iter().map(|&y| psi(x, y)).sum::<f64>() / neg.len() as f64)
        .collect();
    let v01: Vec<f64> = neg
        .iter()
        .map(|&y| pos.iter().map(|&x| psi(x, y)).sum::<f64>() / pos.len() as f64)
        .collect();
    (v10, v01)
}

fn sample_cov(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (n - 1) as f64
}

/// Two-sided DeLong test. With zero variance the p-value falls back to 1
/// for equal AUCs and 0 otherwise.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[usize]) -> Result<DeLongResult> {
    if scores_a.len() != labels.len() || scores_b.len() != labels.len() {
        return Err(Error::Validation("score/label lengths differ".into()));
    }
    let auc_a = roc_auc(scores_a, labels)?;
    let auc_b = roc_auc(scores_b, labels)?;
    let (v10_a, v01_a) = placements(scores_a, labels);
    let (v10_b, v01_b) = placements(scores_b, labels);
    let n_pos = v10_a.len() as f64;
    let n_neg = v01_a.len() as f64;
    let var = (sample_cov(&v10_a, &v10_a) + sample_cov(&v10_b, &v10_b)
        - 2.0 * sample_cov(&v10_a, &v10_b))
        / n_pos
        + (sample_cov(&v01_a, &v01_a) + sample_cov(&v01_b, &v01_b)
            - 2.0 * sample_cov(&v01_a, &v01_b))
            / n_neg;
    let delta = auc_a - auc_b;
    let (z, p_value) = if var <= 1e-15 {
        if delta.abs() <= 1e-12 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY * delta.signum(), 0.0)
        }
    } else {
        let z = delta / var.sqrt();
        (z, libm::erfc(z.abs() / std::f64::consts::SQRT_2))
    };
    Ok(DeLongResult { auc_a, auc_b, z, p_value: p_value.clamp(0.0, 1.0) })
}

/// Mean and sample standard deviation (n-1 denominator, 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    /// Folds the metric was defined on.
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Option<MetricSummary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Some(MetricSummary { mean, std, n })
}

/// Metrics of one fold (or one subgroup slice of a fold).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n: usize,
    pub auc: Option<f64>,
    pub confusion: ConfusionMetrics,
}

/// Per-fold and aggregated metric suite, with optional subgroup breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub folds: Vec<FoldMetrics>,
    pub aggregate: BTreeMap<String, MetricSummary>,
    pub subgroups: BTreeMap<String, MetricsReport>,
}

fn fold_metrics(fold: usize, rows: &[&ScoreRow], threshold: f64) -> Result<FoldMetrics> {
    let scores: Vec<f64> = rows.iter().map(|r| r.score_malignant).collect();
    let labels: Vec<usize> = rows.iter().map(|r| r.label).collect();
    let auc = match roc_auc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(FoldMetrics {
        fold,
        n: rows.len(),
        auc,
        confusion: confusion_metrics(&scores, &labels, threshold)?,
    })
}

/// Aggregates a list of per-fold metrics into mean +/- sample std per
/// metric, skipping folds where a metric is undefined.
pub fn aggregate(folds: &[FoldMetrics]) -> BTreeMap<String, MetricSummary> {
    let mut out = BTreeMap::new();
    let collect = |get: &dyn Fn(&FoldMetrics) -> Option<f64>| {
        let values: Vec<f64> = folds.iter().filter_map(get).collect();
        summarize(&values)
    };
    let entries: [(&str, &dyn Fn(&FoldMetrics) -> Option<f64>); 6] = [
        ("auc", &|f| f.auc),
        ("acc", &|f| f.confusion.acc),
        ("specificity", &|f| f.confusion.specificity),
        ("precision", &|f| f.confusion.precision),
        ("recall", &|f| f.confusion.recall),
        ("f1", &|f| f.confusion.f1),
    ];
    for (name, get) in entries {
        if let Some(summary) = collect(get) {
            out.insert(name.to_string(), summary);
        }
    }
    out
}

/// Builds a report from out-of-fold rows. When `birads` is provided, the
/// rows are additionally sliced into low (2-3) and high (4-5) suspicion
/// subgroups before metric computation.
pub fn report_from_rows(
    rows: &[ScoreRow],
    threshold: f64,
    birads: Option<&BTreeMap<String, BiRads>>,
) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::Validation("empty score table".into()));
    }
    let mut by_fold: BTreeMap<usize, Vec<&ScoreRow>> = BTreeMap::new();
    for r in rows {
        by_fold.entry(r.fold).or_default().push(r);
    }
    let folds = by_fold
        .iter()
        .map(|(&fold, rows)| fold_metrics(fold, rows, threshold))
        .collect::<Result<Vec<_>>>()?;
    let mut report = MetricsReport {
        threshold,
        aggregate: aggregate(&folds),
        folds,
        subgroups: BTreeMap::new(),
    };
    if let Some(birads) = birads {
        for (name, low) in [("birads_2_3", true), ("birads_4_5", false)] {
            let slice: Vec<ScoreRow> = rows
                .iter()
                .filter(|r| birads.get(&r.image_id).is_some_and(|b| b.low_suspicion() == low))
                .cloned()
                .collect();
            if !slice.is_empty() {
                report
                    .subgroups
                    .insert(name.to_string(), report_from_rows(&slice, threshold, None)?);
            }
        }
    }
    Ok(report)
}

/// Renders the aggregate block as an aligned text table.
pub fn render_text(report: &MetricsReport) -> String {
    let mut out = String::new();
    let fmt_cell = |s: Option<&MetricSummary>| match s {
        Some(m) => format!("{:.3}+/-{:.3}", m.mean, m.std),
        None => "undefined".to_string(),
    };
    let names = ["auc", "acc", "specificity", "precision", "recall", "f1"];
    out.push_str(&format!("{:<14}", "metric"));
    for n in names {
        out.push_str(&format!("{n:>16}"));
    }
    out.push('\n');
    let mut push_row = |label: &str, rep: &MetricsReport| {
        out.push_str(&format!("{label:<14}"));
        for n in names {
            out.push_str(&format!("{:>16}", fmt_cell(rep.aggregate.get(n))));
        }
        out.push('\n');
    };
    push_row("all", report);
    for (name, sub) in &report.subgroups {
        push_row(name, sub);
    }
    out
}
