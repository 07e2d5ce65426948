//! Dense per-label evaluation: accuracy, macro-F1, per-class
//! precision/recall and row-normalized confusion matrices.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{cover_windows, stack_windows, windows_at, Dataset, Window};
use crate::error::{Error, Result};
use crate::model::{predict_dense, LabelModel, LabelSpec};

fn check_pair(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} ground-truth steps",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Contract("cannot score an empty sequence".into()));
    }
    Ok(())
}

fn check_ids(pred: &[usize], truth: &[usize], classes: usize) -> Result<()> {
    if let Some(bad) = pred.iter().chain(truth).find(|&&c| c >= classes) {
        return Err(Error::Label(format!("class {bad} out of range for {classes} classes")));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(pred, truth)?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Ground-truth steps of this class.
    pub support: u64,
    pub predicted: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn per_class_from_counts(counts: &[Vec<u64>]) -> Vec<ClassMetrics> {
    let c = counts.len();
    (0..c)
        .map(|i| {
            let tp = counts[i][i];
            let support: u64 = counts[i].iter().sum();
            let predicted: u64 = counts.iter().map(|row| row[i]).sum();
            let (p, r) = (ratio(tp, predicted), ratio(tp, support));
            let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            ClassMetrics {
                name: format!("class_{i}"),
                precision: p,
                recall: r,
                f1,
                support,
                predicted,
            }
        })
        .collect()
}

fn macro_from(classes: &[ClassMetrics]) -> f64 {
    let present: Vec<f64> = classes
        .iter()
        .filter(|m| m.support > 0 || m.predicted > 0)
        .map(|m| m.f1)
        .collect();
    present.iter().sum::<f64>() / present.len() as f64
}

pub fn per_class(pred: &[usize], truth: &[usize], classes: usize) -> Result<Vec<ClassMetrics>> {
    Ok(per_class_from_counts(&count_matrix(pred, truth, classes)?))
}

/// Unweighted mean of per-class F1. Classes that appear neither in the
/// prediction nor in the ground truth do not enter the mean.
pub fn macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    Ok(macro_from(&per_class(pred, truth, classes)?))
}

fn count_matrix(pred: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    check_pair(pred, truth)?;
    check_ids(pred, truth, classes)?;
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[t][p] += 1;
    }
    Ok(counts)
}

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub label: String,
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    /// Each row divided by its sum; rows without support stay zero.
    pub normalized: Vec<Vec<f64>>,
    /// `true` for rows whose class never occurs in the ground truth.
    pub zero_support: Vec<bool>,
}

impl ConfusionMatrix {
    pub fn from_counts(label: &str, class_names: Vec<String>, counts: Vec<Vec<u64>>) -> Self {
        let normalized = counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter().map(|&v| ratio(v, total)).collect()
            })
            .collect();
        let zero_support = counts.iter().map(|row| row.iter().all(|&v| v == 0)).collect();
        Self {
            label: label.to_string(),
            class_names,
            counts,
            normalized,
            zero_support,
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    /// Normalized matrix as CSV: a `truth_class` column followed by one
    /// column per predicted class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth_class");
        for n in &self.class_names {
            write!(out, ",{n}").unwrap();
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.normalized) {
            out.push_str(name);
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(pred: &[usize], truth: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    let counts = count_matrix(pred, truth, classes)?;
    let names = (0..classes).map(|i| format!("class_{i}")).collect();
    Ok(ConfusionMatrix::from_counts("", names, counts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub name: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub classes: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

impl LabelMetrics {
    pub fn compute(spec: &LabelSpec, pred: &[usize], truth: &[usize]) -> Result<Self> {
        let counts = count_matrix(pred, truth, spec.num_classes)?;
        let names: Vec<String> = (0..spec.num_classes).map(|c| spec.class_name(c)).collect();
        let mut classes = per_class_from_counts(&counts);
        for (m, n) in classes.iter_mut().zip(&names) {
            m.name = n.clone();
        }
        Ok(Self {
            name: spec.name.clone(),
            accuracy: accuracy(pred, truth)?,
            macro_f1: macro_from(&classes),
            classes,
            confusion: ConfusionMatrix::from_counts(&spec.name, names, counts),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub seed: Option<u64>,
    pub config_digest: Option<String>,
    pub labels: Vec<LabelMetrics>,
}

impl MetricsReport {
    /// Scores flat `[H][N]` predictions against flat ground truth.
    pub fn from_flat(specs: &[LabelSpec], pred: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<Self> {
        if pred.len() != specs.len() || truth.len() != specs.len() {
            return Err(Error::Contract(format!(
                "{} labels, {} prediction rows, {} truth rows",
                specs.len(),
                pred.len(),
                truth.len()
            )));
        }
        let labels = specs
            .iter()
            .zip(pred.iter().zip(truth))
            .map(|(s, (p, t))| LabelMetrics::compute(s, p, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples: truth[0].len(),
            seed: None,
            config_digest: None,
            labels,
        })
    }

    pub fn label(&self, name: &str) -> Option<&LabelMetrics> {
        self.labels.iter().find(|l| l.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Checks that a model's label specs and channel count match a dataset.
pub fn check_compatible<M: LabelModel + ?Sized>(model: &M, ds: &Dataset) -> Result<()> {
    if model.in_channels() != ds.channels() {
        return Err(Error::Contract(format!(
            "model expects {} channels, dataset has {}",
            model.in_channels(),
            ds.channels()
        )));
    }
    let ml = model.labels();
    if ml.len() != ds.labels.len()
        || ml
            .iter()
            .zip(&ds.labels)
            .any(|(a, b)| a.name != b.name || a.num_classes != b.num_classes)
    {
        let fmt = |l: &[LabelSpec]| {
            l.iter()
                .map(|s| format!("{}({})", s.name, s.num_classes))
                .collect::<Vec<_>>()
                .join(", ")
        };
        return Err(Error::Contract(format!(
            "model labels [{}] do not match dataset labels [{}]",
            fmt(ml),
            fmt(&ds.labels)
        )));
    }
    Ok(())
}

/// Dense predictions `[H][T]` for every sequence. Sequences are covered by
/// windows of `length` on a `stride` grid plus a tail window; where windows
/// overlap, a step takes the prediction of the window whose center is
/// nearest (the earlier window on ties).
pub fn predict_sequences<M: LabelModel + ?Sized>(
    model: &M,
    ds: &Dataset,
    length: usize,
    stride: usize,
) -> Result<Vec<Vec<Vec<usize>>>> {
    check_compatible(model, ds)?;
    let h = ds.num_labels();
    let mut out = Vec::with_capacity(ds.sequences.len());
    for (i, seq) in ds.sequences.iter().enumerate() {
        let t_len = seq.len();
        let offsets = cover_windows(t_len, length, stride)?;
        let windows = windows_at(ds, i, &offsets, length);
        let refs: Vec<&Window> = windows.iter().collect();
        let (x, _) = stack_windows(&refs)?;
        let pred = predict_dense(model, &x)?;
        let mut dense = vec![vec![0usize; t_len]; h];
        let mut best = vec![usize::MAX; t_len];
        for (wi, w) in windows.iter().enumerate() {
            // twice the center, to stay in integers
            let center2 = 2 * w.offset + length - 1;
            for s in 0..w.valid {
                let t = w.offset + s;
                let dist = (2 * t).abs_diff(center2);
                if dist < best[t] {
                    best[t] = dist;
                    for (row, p) in dense.iter_mut().zip(&pred) {
                        row[t] = p[wi * length + s];
                    }
                }
            }
        }
        out.push(dense);
    }
    Ok(out)
}

/// Predicts every sequence and scores all labels over the concatenation.
pub fn evaluate<M: LabelModel + ?Sized>(
    model: &M,
    ds: &Dataset,
    length: usize,
    stride: usize,
) -> Result<(MetricsReport, Vec<Vec<Vec<usize>>>)> {
    let preds = predict_sequences(model, ds, length, stride)?;
    let report = score_sequences(ds, &preds)?;
    Ok((report, preds))
}

/// Scores per-sequence predictions `[seq][H][T]` against a dataset.
pub fn score_sequences(ds: &Dataset, preds: &[Vec<Vec<usize>>]) -> Result<MetricsReport> {
    if preds.len() != ds.sequences.len() {
        return Err(Error::Contract(format!(
            "{} prediction sets for {} sequences",
            preds.len(),
            ds.sequences.len()
        )));
    }
    let h = ds.num_labels();
    let mut flat_pred = vec![Vec::new(); h];
    let mut flat_truth = vec![Vec::new(); h];
    for (seq, p) in ds.sequences.iter().zip(preds) {
        for l in 0..h {
            flat_pred[l].extend_from_slice(&p[l]);
            flat_truth[l].extend_from_slice(&seq.y[l]);
        }
    }
    MetricsReport::from_flat(&ds.labels, &flat_pred, &flat_truth)
}
