//! Supervised and pseudo-label segmentation losses and the total objective.

use serde::{Deserialize, Serialize};

use crate::error::{shape, validation, Error, Result};
use crate::image::LabelMap;
use crate::nn::Maps;
use crate::segnet::Logits;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(validation("class weights must be finite and >= 0"));
        }
        if !weights.iter().any(|w| *w > 0.0) {
            return Err(validation("at least one class weight must be positive"));
        }
        Ok(Self(weights))
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0; num_classes])
    }

    /// `w_c = 1 / ln(1.02 + freq_c)` from label frequencies.
    pub fn inverse_log_frequency<'a>(
        labels: impl IntoIterator<Item = &'a LabelMap>,
        num_classes: usize,
    ) -> Self {
        let mut counts = vec![0usize; num_classes];
        for l in labels {
            for (c, n) in l.histogram().into_iter().enumerate() {
                counts[c] += n;
            }
        }
        let total = counts.iter().sum::<usize>().max(1) as f64;
        Self(
            counts
                .iter()
                .map(|&n| 1.0 / (1.02 + n as f64 / total).ln())
                .collect(),
        )
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self(self.0.iter().map(|w| w * k).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticClassSet(Vec<u8>);

impl StaticClassSet {
    pub fn new(classes: Vec<u8>, num_classes: usize) -> Result<Self> {
        if let Some(c) = classes.iter().find(|&&c| c as usize >= num_classes) {
            return Err(validation(format!("static class {c} out of range")));
        }
        Ok(Self(classes))
    }

    pub fn contains(&self, c: u8) -> bool {
        self.0.contains(&c)
    }

    pub fn classes(&self) -> &[u8] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeLoss {
    pub value: f64,
    /// Number of pixels that contributed.
    pub counted: usize,
}

impl CeLoss {
    /// Set when every pixel was ignored and the loss defaulted to zero.
    pub fn all_ignored(&self) -> bool {
        self.counted == 0
    }
}

fn check_shapes(logits: &Logits, label: &LabelMap, w: &ClassWeights) -> Result<()> {
    let m = &logits.0;
    if m.height != label.height() || m.width != label.width() {
        return Err(shape("logits and label map differ in size"));
    }
    if m.channels != label.num_classes() || w.0.len() != m.channels {
        return Err(shape("class counts of logits, labels and weights differ"));
    }
    Ok(())
}

/// Numerically stable softmax of a column.
pub(crate) fn softmax(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Mean over non-ignored pixels of `w[c]·(−log softmax(logits)[c])`.
pub fn weighted_ce(logits: &Logits, label: &LabelMap, w: &ClassWeights) -> Result<CeLoss> {
    Ok(weighted_ce_impl(logits, label, w, false)?.0)
}

pub fn weighted_ce_with_grad(
    logits: &Logits,
    label: &LabelMap,
    w: &ClassWeights,
) -> Result<(CeLoss, Logits)> {
    let (loss, grad) = weighted_ce_impl(logits, label, w, true)?;
    Ok((loss, grad.expect("requested")))
}

fn weighted_ce_impl(
    logits: &Logits,
    label: &LabelMap,
    w: &ClassWeights,
    with_grad: bool,
) -> Result<(CeLoss, Option<Logits>)> {
    check_shapes(logits, label, w)?;
    let m = &logits.0;
    let n = m.plane_len();
    let k = m.channels;
    let counted = (0..n).filter(|&p| !label.is_ignored(p)).count();
    let mut grad = with_grad.then(|| Maps::zeros(k, m.height, m.width));
    if counted == 0 {
        return Ok((CeLoss { value: 0.0, counted }, grad.map(Logits)));
    }
    let inv = 1.0 / counted as f64;
    let mut total = 0.0;
    let mut col = vec![0.0; k];
    for p in 0..n {
        if label.is_ignored(p) {
            continue;
        }
        let c = label.classes()[p] as usize;
        for (j, v) in col.iter_mut().enumerate() {
            *v = m.data[j * n + p];
        }
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let wc = w.0[c];
        total += wc * (lse - col[c]);
        if let Some(g) = grad.as_mut() {
            for j in 0..k {
                let prob = (col[j] - lse).exp();
                let target = if j == c { 1.0 } else { 0.0 };
                g.data[j * n + p] = wc * (prob - target) * inv;
            }
        }
    }
    Ok((
        CeLoss {
            value: total * inv,
            counted,
        },
        grad.map(Logits),
    ))
}

/// Argmax of the day logits where the class is static and its softmax
/// confidence reaches `tau`; every other pixel is ignored.
pub fn static_pseudo_labels(
    logits_td: &Logits,
    statics: &StaticClassSet,
    tau: f64,
    ignore_index: u8,
) -> Result<LabelMap> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(validation("tau must be in [0, 1]"));
    }
    let m = &logits_td.0;
    let n = m.plane_len();
    let mut classes = vec![ignore_index; n];
    let mut col = vec![0.0; m.channels];
    for (p, out) in classes.iter_mut().enumerate() {
        for (j, v) in col.iter_mut().enumerate() {
            *v = m.data[j * n + p];
        }
        softmax(&mut col);
        let (best, conf) = argmax(&col);
        if statics.contains(best as u8) && conf >= tau {
            *out = best as u8;
        }
    }
    LabelMap::new(m.height, m.width, m.channels as u8, ignore_index, classes)
}

/// Index and value of the first maximum.
pub fn argmax(v: &[f64]) -> (usize, f64) {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
}

/// Cross-entropy of night logits against day-derived pseudo labels.
pub fn l_pseudo(logits_tn: &Logits, pseudo: &LabelMap, w: &ClassWeights) -> Result<CeLoss> {
    weighted_ce(logits_tn, pseudo, w)
}

/// The five components of the training objective for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub seg_n: f64,
    pub seg_d: f64,
    pub pseudo: f64,
    pub cdc: f64,
    pub cds: f64,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("seg_n", self.seg_n),
            ("seg_d", self.seg_d),
            ("pseudo", self.pseudo),
            ("cdc", self.cdc),
            ("cds", self.cds),
        ]
    }
}

/// `L_seg_n + L_seg_d + L_pseudo + λ1·L_CDC + λ2·L_CDS`.
pub fn total_loss(c: &LossComponents, lambda1: f64, lambda2: f64) -> Result<f64> {
    for (name, v) in c.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: name.to_string(),
                iter: 0,
            });
        }
    }
    Ok(c.seg_n + c.seg_d + c.pseudo + lambda1 * c.cdc + lambda2 * c.cds)
}
