//! Class-wise pseudo-label budgets driven by calibrated confidence, the
//! selection rule built on them, and the clustering head's cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax_unchecked, softmax_rows, Matrix};

/// Absorbs summation round-off before flooring a budget, so that e.g. ten
/// probabilities of 0.1 still count as one sample.
const BUDGET_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoLabel {
    pub sample: usize,
    pub label: usize,
    pub confidence: f64,
}

impl PseudoLabel {
    fn new(sample: usize, label: usize, confidence: f64) -> Self {
        Self {
            sample,
            label,
            confidence,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PseudoLabelSet {
    /// Sorted by sample index, at most one entry per sample.
    pub entries: Vec<PseudoLabel>,
    /// Per-class budgets `M(c)`; empty for threshold-based selection.
    pub budgets: Vec<usize>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for e in &self.entries {
            counts[e.label] += 1;
        }
        counts
    }
}

/// How pseudo-labels are chosen from a batch of predictions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SelectionRule {
    /// Per-class budgets from the summed top-⌊B/C⌋ class probabilities.
    Dynamic,
    /// Every sample whose top probability reaches the threshold.
    FixedThreshold(f64),
}

impl SelectionRule {
    pub fn select(&self, probs: &Matrix) -> Result<PseudoLabelSet> {
        match *self {
            SelectionRule::Dynamic => {
                let budgets = class_budgets(probs)?;
                Ok(select_pseudo(probs, &budgets))
            }
            SelectionRule::FixedThreshold(tau) => Ok(select_above_threshold(probs, tau)),
        }
    }
}

/// Samples ordered by their class-`c` probability, highest first, ties to
/// the lower index.
fn ranked_for_class(probs: &Matrix, c: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.rows()).collect();
    order.sort_by(|&a, &b| probs.get(b, c).total_cmp(&probs.get(a, c)).then(a.cmp(&b)));
    order
}

/// `M(c) = ⌊Σ_{i ∈ TOP(c)} p_{i,c}⌋` where `TOP(c)` holds the ⌊B/C⌋ samples
/// with the largest class-`c` probability across the whole batch.
pub fn class_budgets(probs: &Matrix) -> Result<Vec<usize>> {
    let (b, c) = (probs.rows(), probs.cols());
    if c == 0 || b < c {
        return Err(Error::invalid(format!(
            "batch of {b} samples cannot budget {c} classes"
        )));
    }
    let top = b / c;
    Ok((0..c)
        .map(|class| {
            let mut col: Vec<f64> = probs.row_iter().map(|r| r[class]).collect();
            col.sort_by(|x, y| y.total_cmp(x));
            let mass: f64 = col[..top].iter().sum();
            ((mass + BUDGET_SLACK).floor() as usize).min(top)
        })
        .collect())
}

/// Takes the top `budgets[c]` samples of each class list. A sample kept by
/// several lists is labelled with its own highest-probability class, and is
/// dropped when that class did not select it, so every label is an argmax.
pub fn select_pseudo(probs: &Matrix, budgets: &[usize]) -> PseudoLabelSet {
    let b = probs.rows();
    let mut claimed = vec![false; b * probs.cols()];
    for (class, &m) in budgets.iter().enumerate().take(probs.cols()) {
        for &i in ranked_for_class(probs, class).iter().take(m) {
            claimed[i * probs.cols() + class] = true;
        }
    }
    let entries = (0..b)
        .filter_map(|i| {
            let label = argmax_unchecked(probs.row(i));
            claimed[i * probs.cols() + label].then(|| PseudoLabel::new(i, label, probs.get(i, label)))
        })
        .collect();
    PseudoLabelSet {
        entries,
        budgets: budgets.to_vec(),
    }
}

pub fn select_above_threshold(probs: &Matrix, tau: f64) -> PseudoLabelSet {
    let entries = probs
        .row_iter()
        .enumerate()
        .filter_map(|(i, row)| {
            let label = argmax_unchecked(row);
            (row[label] >= tau).then(|| PseudoLabel::new(i, label, row[label]))
        })
        .collect();
    PseudoLabelSet {
        entries,
        budgets: Vec::new(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CluLoss {
    pub loss: f64,
    /// Zero on rows outside the pseudo-label set.
    pub dlogits: Matrix,
}

/// Mean hard-label cross-entropy over the selected rows of `logits`.
/// Returns `None` when nothing is selected.
pub fn clu_loss(logits: &Matrix, set: &PseudoLabelSet) -> Result<Option<CluLoss>> {
    if set.is_empty() {
        return Ok(None);
    }
    let c = logits.cols();
    let p = softmax_rows(logits)?;
    let n = set.len() as f64;
    let mut dlogits = Matrix::zeros(logits.rows(), c);
    let mut loss = 0.0;
    for e in &set.entries {
        if e.sample >= logits.rows() || e.label >= c {
            return Err(Error::invalid(format!(
                "pseudo-label ({}, {}) outside {}x{} logits",
                e.sample,
                e.label,
                logits.rows(),
                c
            )));
        }
        let row = logits.row(e.sample);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[e.label];
        let g = dlogits.row_mut(e.sample);
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = p.get(e.sample, j) / n;
        }
        g[e.label] -= 1.0 / n;
    }
    Ok(Some(CluLoss {
        loss: loss / n,
        dlogits,
    }))
}
