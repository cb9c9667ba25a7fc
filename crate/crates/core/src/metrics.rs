//! Evaluation metrics: rank-based AUC, F1-macro, GMean, confusion
//! statistics, and multi-seed aggregation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Label;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("evaluation mask needs both classes (got {n_pos} positives, {n_neg} negatives)")]
    SingleClass { n_pos: usize, n_neg: usize },
    #[error("threshold must lie in (0,1), got {0}")]
    BadThreshold(f64),
    #[error("aggregation needs at least 2 reports, got {0}")]
    TooFewReports(usize),
    #[error("scores/labels length mismatch: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
}

/// Metrics for one evaluated split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub f1_macro: f64,
    pub gmean: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub threshold: f64,
    pub n_eval: usize,
}

fn gather(
    scores: &[f64],
    labels: &[Label],
    mask: &[usize],
) -> Result<(Vec<f64>, Vec<bool>), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let mut s = Vec::with_capacity(mask.len());
    let mut pos = Vec::with_capacity(mask.len());
    for &v in mask {
        s.push(scores[v]);
        pos.push(labels[v] == 1);
    }
    let n_pos = pos.iter().filter(|&&p| p).count();
    let n_neg = pos.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass { n_pos, n_neg });
    }
    Ok((s, pos))
}

/// Area under the ROC curve via the Mann-Whitney statistic with average
/// ranks for tied scores.
pub fn auc(scores: &[f64], labels: &[Label], mask: &[usize]) -> Result<f64, MetricsError> {
    let (s, pos) = gather(scores, labels, mask)?;
    let n = s.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s[a].total_cmp(&s[b]));

    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && s[order[j]] == s[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j averaged over the tie group
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    let n_pos = pos.iter().filter(|&&p| p).count();
    let n_neg = n - n_pos;
    let rank_sum: f64 = (0..n).filter(|&k| pos[k]).map(|k| ranks[k]).sum();
    let numer = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(numer / (n_pos as f64 * n_neg as f64))
}

/// Confusion counts at a fixed threshold (predict anomaly iff score >= t).
pub fn confusion(
    scores: &[f64],
    labels: &[Label],
    mask: &[usize],
    threshold: f64,
) -> Result<(usize, usize, usize, usize), MetricsError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricsError::BadThreshold(threshold));
    }
    let (s, pos) = gather(scores, labels, mask)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (score, &is_pos) in s.iter().zip(&pos) {
        let pred_pos = *score >= threshold;
        match (is_pos, pred_pos) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    Ok((tp, fp, tn, fn_))
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Unweighted mean of the per-class F1 scores.
pub fn f1_macro(
    scores: &[f64],
    labels: &[Label],
    mask: &[usize],
    threshold: f64,
) -> Result<f64, MetricsError> {
    let (tp, fp, tn, fn_) = confusion(scores, labels, mask, threshold)?;
    let f1_pos = f1_from_counts(tp, fp, fn_);
    // for the negative class, tn acts as tp and the error roles swap
    let f1_neg = f1_from_counts(tn, fn_, fp);
    Ok(0.5 * (f1_pos + f1_neg))
}

/// Geometric mean of true-positive and true-negative rate.
pub fn gmean(
    scores: &[f64],
    labels: &[Label],
    mask: &[usize],
    threshold: f64,
) -> Result<f64, MetricsError> {
    let (tp, fp, tn, fn_) = confusion(scores, labels, mask, threshold)?;
    let tpr = tp as f64 / (tp + fn_) as f64;
    let tnr = tn as f64 / (tn + fp) as f64;
    Ok((tpr * tnr).sqrt())
}

/// Full report at one threshold.
pub fn evaluate(
    scores: &[f64],
    labels: &[Label],
    mask: &[usize],
    threshold: f64,
) -> Result<MetricsReport, MetricsError> {
    let (tp, fp, tn, fn_) = confusion(scores, labels, mask, threshold)?;
    Ok(MetricsReport {
        auc: auc(scores, labels, mask)?,
        f1_macro: f1_macro(scores, labels, mask, threshold)?,
        gmean: gmean(scores, labels, mask, threshold)?,
        tp,
        fp,
        tn,
        fn_,
        threshold,
        n_eval: mask.len(),
    })
}

/// Threshold in (0,1) maximizing F1-macro on the given mask, scanning the
/// distinct score values. Ties go to the smallest threshold.
pub fn best_f1_threshold(
    scores: &[f64],
    labels: &[Label],
    mask: &[usize],
) -> Result<f64, MetricsError> {
    let (s, _) = gather(scores, labels, mask)?;
    let mut candidates: Vec<f64> = s
        .iter()
        .copied()
        .filter(|v| *v > 0.0 && *v < 1.0)
        .collect();
    candidates.push(0.5);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (f64::NEG_INFINITY, 0.5);
    for t in candidates {
        let f1 = f1_macro(scores, labels, mask, t)?;
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    Ok(best.1)
}

/// Mean and sample standard deviation of one metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub auc: MeanStd,
    pub f1_macro: MeanStd,
    pub gmean: MeanStd,
    pub n_runs: usize,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.iter().all(|v| *v == values[0]) {
        return MeanStd {
            mean: values[0],
            std: 0.0,
        };
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

/// Per-metric mean and sample (n-1) standard deviation over several runs.
pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<AggregateReport, MetricsError> {
    if reports.len() < 2 {
        return Err(MetricsError::TooFewReports(reports.len()));
    }
    let collect = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    Ok(AggregateReport {
        auc: mean_std(&collect(|r| r.auc)),
        f1_macro: mean_std(&collect(|r| r.f1_macro)),
        gmean: mean_std(&collect(|r| r.gmean)),
        n_runs: reports.len(),
    })
}
