//! Clustering agreement (Hungarian-matched accuracy, NMI, ARI), calibration
//! (binned ECE) and failure-rejection (AUROC, AURC, FPR95) metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax_unchecked, Matrix};

pub const DEFAULT_ECE_BINS: usize = 15;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("label length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Relabels values to `0..k` in ascending order of the original value.
fn compress(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let index: BTreeMap<usize, usize> = distinct.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    (labels.iter().map(|l| index[l]).collect(), distinct)
}

/// Contingency counts with rows indexed by compressed `a`, columns by `b`.
struct Contingency {
    counts: Vec<Vec<u64>>,
    row_labels: Vec<usize>,
    col_labels: Vec<usize>,
    n: u64,
}

impl Contingency {
    fn new(a: &[usize], b: &[usize]) -> Self {
        let (ca, row_labels) = compress(a);
        let (cb, col_labels) = compress(b);
        let mut counts = vec![vec![0u64; col_labels.len()]; row_labels.len()];
        for (&i, &j) in ca.iter().zip(&cb) {
            counts[i][j] += 1;
        }
        Self {
            counts,
            row_labels,
            col_labels,
            n: a.len() as u64,
        }
    }

    fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<u64> {
        let mut s = vec![0; self.col_labels.len()];
        for r in &self.counts {
            for (acc, v) in s.iter_mut().zip(r) {
                *acc += v;
            }
        }
        s
    }
}

/// Minimum-cost perfect matching on a square matrix (shortest augmenting
/// paths with potentials). Returns the column matched to each row.
fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    const INF: i64 = i64::MAX / 4;
    // 1-based arrays; index 0 is the virtual source.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        if matched_row[j] > 0 {
            col_of_row[matched_row[j] - 1] = j - 1;
        }
    }
    col_of_row
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchedAccuracy {
    pub acc: f64,
    /// `(predicted cluster, ground-truth class)` pairs of the optimal matching.
    pub mapping: Vec<(usize, usize)>,
}

impl MatchedAccuracy {
    pub fn map(&self, cluster: usize) -> Option<usize> {
        self.mapping.iter().find(|(p, _)| *p == cluster).map(|&(_, t)| t)
    }
}

/// Clustering accuracy under the best one-to-one cluster-to-class matching.
/// Unequal cluster and class counts are padded with zero-weight dummies.
pub fn hungarian_acc(pred: &[usize], truth: &[usize]) -> Result<MatchedAccuracy> {
    check_lengths(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(Error::invalid("accuracy of an empty labelling"));
    }
    let table = Contingency::new(pred, truth);
    let (r, c) = (table.row_labels.len(), table.col_labels.len());
    let n = r.max(c);
    let max = table.n as i64;
    let cost: Vec<Vec<i64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i < r && j < c {
                        max - table.counts[i][j] as i64
                    } else {
                        max
                    }
                })
                .collect()
        })
        .collect();
    let assign = min_cost_assignment(&cost);
    let mut hits = 0u64;
    let mut mapping = Vec::new();
    for (i, &j) in assign.iter().enumerate() {
        if i < r && j < c {
            hits += table.counts[i][j];
            mapping.push((table.row_labels[i], table.col_labels[j]));
        }
    }
    Ok(MatchedAccuracy {
        acc: hits as f64 / table.n as f64,
        mapping,
    })
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the entropies.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let table = Contingency::new(pred, truth);
    let n = table.n as f64;
    let rows = table.row_sums();
    let cols = table.col_sums();
    let (hu, hv) = (entropy(&rows, n), entropy(&cols, n));
    if hu == 0.0 || hv == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    Ok((mi / ((hu + hv) / 2.0)).max(0.0))
}

fn pairs(x: u64) -> f64 {
    (x * x.saturating_sub(1) / 2) as f64
}

/// Adjusted Rand index from pair counts. Identical trivial partitions
/// (all-in-one or all-singletons on both sides) score 1.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    if pred.len() < 2 {
        return Err(Error::invalid("ARI needs at least two samples"));
    }
    let table = Contingency::new(pred, truth);
    let index: f64 = table.counts.iter().flatten().map(|&c| pairs(c)).sum();
    let sum_a: f64 = table.row_sums().into_iter().map(pairs).sum();
    let sum_b: f64 = table.col_sums().into_iter().map(pairs).sum();
    let total = pairs(table.n);
    let expected = sum_a * sum_b / total;
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Zero for empty bins.
    pub accuracy: f64,
    pub mean_confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ece {
    pub ece: f64,
    pub bins: Vec<ReliabilityBin>,
}

fn bin_edge(i: usize, bins: usize) -> f64 {
    i as f64 / bins as f64
}

/// Bin of `conf` among `bins` equal-width bins; `[lo, hi)` except the last,
/// which also takes 1.0.
fn bin_index(conf: f64, bins: usize) -> usize {
    let mut idx = ((conf * bins as f64).floor() as usize).min(bins - 1);
    while idx > 0 && conf < bin_edge(idx, bins) {
        idx -= 1;
    }
    while idx + 1 < bins && conf >= bin_edge(idx + 1, bins) {
        idx += 1;
    }
    idx
}

/// Expected calibration error over equal-width confidence bins.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<Ece> {
    check_lengths(confidences.len(), correct.len())?;
    if bins == 0 {
        return Err(Error::invalid("at least one bin is required"));
    }
    if confidences.is_empty() {
        return Err(Error::invalid("ECE of an empty sample"));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::invalid(format!("confidence {c} outside [0, 1]")));
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c, bins);
        count[b] += 1;
        hits[b] += ok as usize;
        conf_sum[b] += c;
    }
    let n = confidences.len() as f64;
    let mut total = 0.0;
    let table = (0..bins)
        .map(|b| {
            let (accuracy, mean_confidence) = if count[b] > 0 {
                (hits[b] as f64 / count[b] as f64, conf_sum[b] / count[b] as f64)
            } else {
                (0.0, 0.0)
            };
            total += count[b] as f64 / n * (accuracy - mean_confidence).abs();
            ReliabilityBin {
                lower: bin_edge(b, bins),
                upper: bin_edge(b + 1, bins),
                count: count[b],
                accuracy,
                mean_confidence,
            }
        })
        .collect();
    Ok(Ece {
        ece: total,
        bins: table,
    })
}

fn class_counts(flags: &[bool]) -> (usize, usize) {
    let pos = flags.iter().filter(|&&f| f).count();
    (pos, flags.len() - pos)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann–Whitney form via average ranks).
pub fn auroc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), positives.len())?;
    let (p, q) = class_counts(positives);
    if p == 0 || q == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both positive and negative samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tie averages integral.
    let mut rank2_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks start+1..=end average to (start + 1 + end) / 2.
        let avg2 = (start + 1 + end) as u64;
        let pos_in_group = order[start..end].iter().filter(|&&i| positives[i]).count() as u64;
        rank2_sum += avg2 * pos_in_group;
        start = end;
    }
    let (p64, q64) = (p as u64, q as u64);
    let u2 = rank2_sum - p64 * (p64 + 1);
    Ok(u2 as f64 / (2 * p64 * q64) as f64)
}

/// Samples in admission order: descending score, ties by index.
fn admission_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// `(coverage, risk)` after admitting each sample in descending score order.
pub fn risk_coverage_curve(scores: &[f64], correct: &[bool]) -> Result<Vec<(f64, f64)>> {
    check_lengths(scores.len(), correct.len())?;
    let n = scores.len() as f64;
    let mut errors = 0usize;
    Ok(admission_order(scores)
        .into_iter()
        .enumerate()
        .map(|(k, i)| {
            errors += !correct[i] as usize;
            ((k + 1) as f64 / n, errors as f64 / (k + 1) as f64)
        })
        .collect())
}

/// Mean selective risk over all coverage levels `1/N, 2/N, …, 1`.
pub fn aurc(scores: &[f64], correct: &[bool]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("AURC of an empty sample"));
    }
    let curve = risk_coverage_curve(scores, correct)?;
    Ok(curve.iter().map(|&(_, r)| r).sum::<f64>() / curve.len() as f64)
}

/// False-positive rate at the highest threshold whose true-positive rate over
/// the correct predictions is at least 95%. A score equal to the threshold is
/// admitted.
pub fn fpr_at_95_tpr(scores: &[f64], correct: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), correct.len())?;
    let (p, q) = class_counts(correct);
    if p == 0 || q == 0 {
        return Err(Error::UndefinedMetric(
            "FPR95 needs both correct and incorrect predictions".into(),
        ));
    }
    let order = admission_order(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if correct[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        // tp / p ≥ 0.95 in integers.
        if tp * 100 >= 95 * p {
            return Ok(fp as f64 / q as f64);
        }
    }
    Ok(fp as f64 / q as f64)
}

/// Full evaluation of one prediction matrix against ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    /// `NaN` when every prediction is correct or every one is wrong.
    pub auroc: f64,
    pub aurc: f64,
    pub fpr95: f64,
    pub samples: usize,
    /// Risk after admitting each sample, ordered by confidence.
    pub risk_coverage: Vec<(f64, f64)>,
}

/// Confidences, correctness flags, the matching and the raw predictions.
pub type Scored = (Vec<f64>, Vec<bool>, MatchedAccuracy, Vec<usize>);

/// Per-sample confidence (maximum softmax probability) and correctness
/// under the Hungarian matching.
pub fn confidence_and_correctness(probs: &Matrix, truth: &[usize]) -> Result<Scored> {
    check_lengths(probs.rows(), truth.len())?;
    let pred: Vec<usize> = probs.row_iter().map(argmax_unchecked).collect();
    let matched = hungarian_acc(&pred, truth)?;
    let lookup: BTreeMap<usize, usize> = matched.mapping.iter().copied().collect();
    let correct: Vec<bool> = pred.iter().zip(truth).map(|(p, t)| lookup.get(p) == Some(t)).collect();
    let conf: Vec<f64> = probs
        .row_iter()
        .map(|r| r.iter().copied().fold(0.0, f64::max).clamp(0.0, 1.0))
        .collect();
    Ok((conf, correct, matched, pred))
}

pub fn evaluate(probs: &Matrix, truth: &[usize], bins: usize) -> Result<CalibrationReport> {
    let (conf, correct, matched, pred) = confidence_and_correctness(probs, truth)?;
    let calib = ece(&conf, &correct, bins)?;
    let undefined_nan = |r: Result<f64>| match r {
        Ok(v) => Ok(v),
        Err(Error::UndefinedMetric(_)) => Ok(f64::NAN),
        Err(e) => Err(e),
    };
    Ok(CalibrationReport {
        bins: calib.bins,
        ece: calib.ece,
        acc: matched.acc,
        nmi: nmi(&pred, truth)?,
        ari: if pred.len() >= 2 { ari(&pred, truth)? } else { f64::NAN },
        auroc: undefined_nan(auroc(&conf, &correct))?,
        aurc: aurc(&conf, &correct)?,
        fpr95: undefined_nan(fpr_at_95_tpr(&conf, &correct))?,
        samples: truth.len(),
        risk_coverage: risk_coverage_curve(&conf, &correct)?,
    })
}
