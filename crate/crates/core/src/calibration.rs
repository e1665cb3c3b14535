//! Calibration-head objective: mini-cluster mean targets, the cross-entropy
//! against those targets, and the batch-level negative-entropy balance term.

use crate::error::{Error, Result};
use crate::numerics::{argmax_unchecked, softmax_rows, Matrix};

/// Guard inside every logarithm of a probability.
pub const LOG_EPS: f64 = 1e-12;
pub const DEFAULT_W_EN: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MiniClusterPartition {
    /// Mini-cluster index of each batch sample.
    pub assignment: Vec<usize>,
    /// `K × C`; row `k` is the mean clustering prediction over mini-cluster `k`.
    pub targets: Matrix,
    pub member_counts: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    /// Every member predicts the same class.
    Reliable,
    Unreliable,
}

/// Averages clustering-head predictions within each mini-cluster.
pub fn partition_targets(p_clu: &Matrix, assignment: &[usize], k: usize) -> Result<MiniClusterPartition> {
    if assignment.len() != p_clu.rows() {
        return Err(Error::invalid(format!(
            "{} assignments for {} prediction rows",
            assignment.len(),
            p_clu.rows()
        )));
    }
    let c = p_clu.cols();
    let mut targets = Matrix::zeros(k, c);
    let mut member_counts = vec![0usize; k];
    for (row, &a) in p_clu.row_iter().zip(assignment) {
        if a >= k {
            return Err(Error::invalid(format!(
                "mini-cluster index {a} out of range for k = {k}"
            )));
        }
        member_counts[a] += 1;
        for (t, p) in targets.row_mut(a).iter_mut().zip(row) {
            *t += p;
        }
    }
    for (j, &n) in member_counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::Internal(format!("mini-cluster {j} is empty")));
        }
        let n = n as f64;
        for t in targets.row_mut(j) {
            *t /= n;
        }
    }
    Ok(MiniClusterPartition {
        assignment: assignment.to_vec(),
        targets,
        member_counts,
    })
}

/// Tags each mini-cluster by whether its members agree on the predicted class.
pub fn region_tags(p_clu: &Matrix, part: &MiniClusterPartition) -> Vec<Region> {
    let k = part.member_counts.len();
    let mut first: Vec<Option<usize>> = vec![None; k];
    let mut tags = vec![Region::Reliable; k];
    for (row, &a) in p_clu.row_iter().zip(&part.assignment) {
        let label = argmax_unchecked(row);
        match first[a] {
            None => first[a] = Some(label),
            Some(l) if l != label => tags[a] = Region::Unreliable,
            Some(_) => {}
        }
    }
    tags
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationLoss {
    /// `cross_entropy + w_en · neg_entropy`
    pub loss: f64,
    pub cross_entropy: f64,
    pub neg_entropy: f64,
    /// Gradient with respect to the calibration logits.
    pub dlogits: Matrix,
}

/// Calibration-head loss for a batch of logits.
///
/// `assignment[i]` names the mini-cluster whose target supervises row `i`.
/// The balance term is `(1/C) Σ_j p̄_j log p̄_j` where `p̄` is the batch-mean
/// calibrated prediction.
pub fn calibration_loss(
    logits: &Matrix,
    part: &MiniClusterPartition,
    assignment: &[usize],
    w_en: f64,
) -> Result<CalibrationLoss> {
    let b = logits.rows();
    let c = logits.cols();
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if assignment.len() != b {
        return Err(Error::invalid("assignment length differs from logit rows"));
    }
    if part.targets.cols() != c {
        return Err(Error::invalid(format!(
            "targets have {} classes, logits {c}",
            part.targets.cols()
        )));
    }
    if !(w_en >= 0.0) {
        return Err(Error::invalid("w_en must be non-negative"));
    }
    let p = softmax_rows(logits)?;
    let bf = b as f64;
    let cf = c as f64;

    // dL/dp, accumulated per entry, then pushed through the softmax Jacobian.
    let mut dp = Matrix::zeros(b, c);
    let mut cross_entropy = 0.0;
    for i in 0..b {
        let k = assignment[i];
        if k >= part.targets.rows() {
            return Err(Error::invalid(format!("mini-cluster index {k} out of range")));
        }
        let q = part.targets.row(k);
        let pi = p.row(i);
        let gi = dp.row_mut(i);
        for j in 0..c {
            cross_entropy -= q[j] * (pi[j] + LOG_EPS).ln();
            gi[j] = -q[j] / (pi[j] + LOG_EPS) / bf;
        }
    }
    cross_entropy /= bf;

    let mean = p.col_means();
    let mut neg_entropy = 0.0;
    let mut dmean = vec![0.0; c];
    for j in 0..c {
        let m = mean[j];
        neg_entropy += m * (m + LOG_EPS).ln();
        dmean[j] = ((m + LOG_EPS).ln() + m / (m + LOG_EPS)) / cf;
    }
    neg_entropy /= cf;
    if w_en != 0.0 {
        for row in dp.data_mut().chunks_exact_mut(c) {
            for j in 0..c {
                row[j] += w_en * dmean[j] / bf;
            }
        }
    }

    let dlogits = softmax_backward(&p, &dp);
    Ok(CalibrationLoss {
        loss: cross_entropy + w_en * neg_entropy,
        cross_entropy,
        neg_entropy,
        dlogits,
    })
}

/// Pulls `dL/dp` back through a row-wise softmax given its output `p`.
pub(crate) fn softmax_backward(p: &Matrix, dp: &Matrix) -> Matrix {
    let c = p.cols();
    let mut out = Matrix::zeros(p.rows(), c);
    for i in 0..p.rows() {
        let pi = p.row(i);
        let gi = dp.row(i);
        let inner: f64 = pi.iter().zip(gi).map(|(a, b)| a * b).sum();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = pi[j] * (gi[j] - inner);
        }
    }
    out
}
