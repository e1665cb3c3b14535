//! Prototype-based head initialization. The first layer gets the normalized
//! K-means centers of the input features. The second layer gets the
//! normalized K-means centers (k = classes, best of several restarts) of the
//! resulting eval-mode hidden activations, with zero bias.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{HeadParams, Mode};
use crate::kmeans::{assign_nearest, kmeans, kmeans_restarts, DEFAULT_MAX_ITERS, DEFAULT_RESTARTS, DEFAULT_TOL};
use crate::metrics::hungarian_acc;
use crate::numerics::{argmax_rows, l2_normalize_rows, Matrix, RngState};

const FIRST_LAYER_STREAM: u64 = 1;
const SECOND_LAYER_STREAM: u64 = 2;

/// Diagnostics of an initialization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    /// Hungarian accuracy of K-means (k = C) on the normalized features.
    pub kmeans_acc_features: f64,
    /// Hungarian accuracy of the freshly initialized head in eval mode.
    pub head_acc_post_init: f64,
    /// Fraction of samples whose first-layer argmax equals their nearest
    /// prototype, measured before orthogonalization.
    pub alignment_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Initialized {
    pub head: HeadParams,
    pub alignment_rate: f64,
    /// Whether each layer (w1, w2) was orthogonalized or skipped.
    pub orthogonalized: [bool; 2],
}

/// Builds a head whose layers start at feature prototypes.
///
/// `z` is normalized row-wise first; the head expects normalized inputs.
pub fn init_head(
    z: &Matrix,
    h_units: usize,
    classes: usize,
    rng: RngState,
    orthogonalize: bool,
) -> Result<Initialized> {
    let n = z.rows();
    if h_units == 0 || classes == 0 {
        return Err(Error::invalid("hidden and class counts must be positive"));
    }
    if h_units > n || classes > n {
        return Err(Error::invalid(format!(
            "cannot extract {h_units} hidden or {classes} class prototypes from {n} samples"
        )));
    }
    z.require_finite("features")?;
    let zn = l2_normalize_rows(z).matrix;
    if all_rows_identical(&zn) {
        return Err(Error::Degenerate(
            "all feature rows are identical; prototypes would coincide".into(),
        ));
    }

    let first = kmeans(
        &zn,
        h_units,
        rng.fork(FIRST_LAYER_STREAM),
        DEFAULT_MAX_ITERS,
        DEFAULT_TOL,
    )?;
    let normalized = l2_normalize_rows(&first.centers);
    if !normalized.degenerate_rows.is_empty() {
        return Err(Error::Degenerate(format!(
            "{} first-layer prototypes have zero norm",
            normalized.degenerate_rows.len()
        )));
    }
    let prototypes = normalized.matrix;
    if has_duplicate_rows(&prototypes) {
        return Err(Error::Degenerate(
            "duplicate first-layer prototypes; too few distinct feature rows".into(),
        ));
    }

    let mut head = HeadParams::zeros(z.cols(), h_units, classes);
    head.w1 = prototypes;
    let alignment_rate = first_layer_alignment(&head.w1, &zn)?;

    // Running statistics start at the population moments of the first
    // layer so eval-mode and train-mode activations agree from step one.
    let (_, train_cache) = head.forward(&zn, Mode::Train)?;
    head.bn_running_mean = train_cache.mean;
    head.bn_running_var = train_cache.var;

    let (_, cache) = head.forward(&zn, Mode::Eval)?;
    let hidden = cache.hidden;
    if all_rows_identical(&hidden) {
        return Err(Error::Degenerate(
            "hidden activations are identical for every sample".into(),
        ));
    }
    let second = kmeans_restarts(
        &hidden,
        classes,
        rng.fork(SECOND_LAYER_STREAM),
        DEFAULT_RESTARTS,
        DEFAULT_MAX_ITERS,
        DEFAULT_TOL,
    )?;
    let normalized = l2_normalize_rows(&second.centers);
    if !normalized.degenerate_rows.is_empty() {
        return Err(Error::Degenerate(
            "a class prototype of the hidden activations is zero".into(),
        ));
    }
    head.w2 = normalized.matrix;

    let mut orthogonalized = [false; 2];
    if orthogonalize {
        let r1 = orthogonalize_rows(&head.w1);
        orthogonalized[0] = !r1.skipped;
        head.w1 = r1.matrix;
        let r2 = orthogonalize_rows(&head.w2);
        orthogonalized[1] = !r2.skipped;
        head.w2 = r2.matrix;
    }
    Ok(Initialized {
        head,
        alignment_rate,
        orthogonalized,
    })
}

/// Fraction of rows where `argmax(w·z)` equals the nearest row of `w`.
pub fn first_layer_alignment(w: &Matrix, zn: &Matrix) -> Result<f64> {
    if zn.rows() == 0 {
        return Ok(1.0);
    }
    let by_inner = argmax_rows(&zn.matmul_nt(w)?);
    let by_distance = assign_nearest(zn, w)?;
    let agree = by_inner.iter().zip(&by_distance).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / zn.rows() as f64)
}

fn all_rows_identical(m: &Matrix) -> bool {
    m.rows() > 0 && m.row_iter().all(|r| r == m.row(0))
}

fn has_duplicate_rows(m: &Matrix) -> bool {
    let mut rows: Vec<&[f64]> = m.row_iter().collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows.windows(2).any(|w| w[0] == w[1])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Orthogonalized {
    pub matrix: Matrix,
    /// True when the input was returned unchanged (more rows than columns or
    /// linearly dependent rows).
    pub skipped: bool,
}

/// Modified Gram–Schmidt over the rows, each result rescaled to the norm of
/// the corresponding input row.
pub fn orthogonalize_rows(w: &Matrix) -> Orthogonalized {
    let unchanged = |why: &str| {
        warn!("orthogonalization skipped: {why}");
        Orthogonalized {
            matrix: w.clone(),
            skipped: true,
        }
    };
    if w.rows() > w.cols() {
        return unchanged(&format!("{} rows exceed {} columns", w.rows(), w.cols()));
    }
    let norms: Vec<f64> = w
        .row_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut q = w.clone();
    for i in 0..q.rows() {
        for j in 0..i {
            let (done, rest) = q.data_mut().split_at_mut(i * w.cols());
            let qj = &done[j * w.cols()..(j + 1) * w.cols()];
            let qi = &mut rest[..w.cols()];
            let proj: f64 = qi.iter().zip(qj).map(|(a, b)| a * b).sum();
            for (a, b) in qi.iter_mut().zip(qj) {
                *a -= proj * b;
            }
        }
        let row = q.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 * norms[i].max(f64::MIN_POSITIVE) || norm == 0.0 {
            return unchanged(&format!("row {i} is linearly dependent on earlier rows"));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    for (i, &n) in norms.iter().enumerate() {
        for v in q.row_mut(i) {
            *v *= n;
        }
    }
    Orthogonalized {
        matrix: q,
        skipped: false,
    }
}

/// Accuracy diagnostics for an initialized head against known labels.
pub fn init_report(
    z: &Matrix,
    labels: &[usize],
    head: &HeadParams,
    alignment_rate: f64,
    rng: RngState,
) -> Result<InitReport> {
    let zn = l2_normalize_rows(z).matrix;
    let km = kmeans_restarts(
        &zn,
        head.classes(),
        rng,
        DEFAULT_RESTARTS,
        DEFAULT_MAX_ITERS,
        DEFAULT_TOL,
    )?;
    let kmeans_acc_features = hungarian_acc(&km.assignment, labels)?.acc;
    let (logits, _) = head.forward(&zn, Mode::Eval)?;
    let head_acc_post_init = hungarian_acc(&argmax_rows(&logits), labels)?.acc;
    Ok(InitReport {
        kmeans_acc_features,
        head_acc_post_init,
        alignment_rate,
    })
}
