//! Segmentation scoring and ablation tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape, validation, Result};
use crate::image::LabelMap;
use crate::objective::argmax;
use crate::segnet::Logits;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Pixel counts; truth pixels equal to the ignore index are skipped, and
/// predictions outside the class range are rejected.
pub fn confusion(pred: &LabelMap, truth: &LabelMap) -> Result<ConfusionMatrix> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(shape("prediction and truth differ in size"));
    }
    let k = truth.num_classes();
    let mut cm = ConfusionMatrix::new(k);
    for (i, (&p, &t)) in pred.classes().iter().zip(truth.classes()).enumerate() {
        if truth.is_ignored(i) {
            continue;
        }
        if p as usize >= k {
            return Err(validation(format!("prediction {p} outside class range")));
        }
        cm.counts[t as usize * k + p as usize] += 1;
    }
    Ok(cm)
}

/// `TP / (TP + FP + FN)` per class; `None` for classes with an empty union.
pub fn per_class_iou(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    let k = cm.num_classes;
    (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..k).map(|p| cm.get(c, p)).sum::<u64>() - tp;
            let fp: u64 = (0..k).map(|t| cm.get(t, c)).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect()
}

/// Mean IoU over present classes.
pub fn miou(per_class: &[Option<f64>]) -> Result<f64> {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(validation("no class present in prediction or truth"));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Per-pixel argmax of the logits.
pub fn predict(logits: &Logits, ignore_index: u8) -> Result<LabelMap> {
    let m = &logits.0;
    let n = m.plane_len();
    let classes = (0..n)
        .map(|p| {
            let col: Vec<f64> = (0..m.channels).map(|c| m.data[c * n + p]).collect();
            argmax(&col).0 as u8
        })
        .collect();
    LabelMap::new(m.height, m.width, m.channels as u8, ignore_index, classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalScore {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub confusion: ConfusionMatrix,
}

/// Scores a sequence of `(prediction, truth)` pairs with one pooled matrix.
pub fn score<'a>(
    pairs: impl IntoIterator<Item = (&'a LabelMap, &'a LabelMap)>,
    num_classes: usize,
) -> Result<EvalScore> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, t) in pairs {
        cm.merge(&confusion(p, t)?);
    }
    let per_class = per_class_iou(&cm);
    let m = miou(&per_class)?;
    Ok(EvalScore {
        per_class_iou: per_class,
        miou: m,
        confusion: cm,
    })
}

/// Final result of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub seed: u64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single run).
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<ReportRow>,
}

/// Groups runs by variant, in order of first appearance.
pub fn report(runs: &[RunSummary]) -> Result<AblationReport> {
    if runs.is_empty() {
        return Err(validation("report needs at least one run"));
    }
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    let rows = order
        .into_iter()
        .map(|v| {
            let vals: Vec<f64> = runs.iter().filter(|r| r.variant == v).map(|r| r.miou).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = if vals.len() > 1 {
                (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            ReportRow {
                variant: v.to_string(),
                runs: vals.len(),
                mean,
                std,
            }
        })
        .collect();
    Ok(AblationReport { rows })
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Aligned plain-text table, mIoU in percent.
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.variant.len())
            .max()
            .unwrap_or(0)
            .max("variant".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  runs  mIoU (%)", "variant");
        let _ = writeln!(out, "{}", "-".repeat(width + 22));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>4}  {:6.2} ± {:.2}",
                r.variant,
                r.runs,
                100.0 * r.mean,
                100.0 * r.std
            );
        }
        out
    }
}
