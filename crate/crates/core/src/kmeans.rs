//! Lloyd's K-means with K-means++ seeding. Used both for the per-batch
//! mini-cluster partition and for extracting layer prototypes.

use crate::error::{Error, Result};
use crate::numerics::{squared_distance, Matrix, RngState};
use crate::parallel;

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_RESTARTS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// `k × D` centers.
    pub centers: Matrix,
    pub assignment: Vec<usize>,
    /// Sum of squared distances to the assigned centers.
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step, starting from the seeding.
    pub inertia_trace: Vec<f64>,
}

/// Clusters the rows of `x` into `k` groups.
///
/// Iterates until the assignment is stable, the relative center movement
/// drops below `tol`, or `max_iters` updates have run. Empty clusters are
/// re-seeded with the point farthest from its current center.
pub fn kmeans(x: &Matrix, k: usize, mut rng: RngState, max_iters: usize, tol: f64) -> Result<KMeansResult> {
    let n = x.rows();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds sample count {n}")));
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }
    x.require_finite("features")?;

    let mut centers = plus_plus_seed(x, k, &mut rng);
    let (mut assignment, mut dists) = nearest_with_dist(x, &centers);
    let mut inertia_trace = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        let new_centers = update_centers(x, &assignment, &dists, k);
        let movement = relative_movement(&centers, &new_centers);
        centers = new_centers;
        let (new_assignment, new_dists) = nearest_with_dist(x, &centers);
        inertia_trace.push(new_dists.iter().sum());
        let stable = new_assignment == assignment;
        assignment = new_assignment;
        dists = new_dists;
        if stable || movement < tol {
            break;
        }
    }

    let inertia = dists.iter().sum();
    Ok(KMeansResult {
        centers,
        assignment,
        inertia,
        iterations,
        inertia_trace,
    })
}

/// Best of `restarts` independent runs by final inertia (earliest run on
/// ties). Run `r` uses `rng.fork(r)`.
pub fn kmeans_restarts(
    x: &Matrix,
    k: usize,
    rng: RngState,
    restarts: usize,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansResult> {
    if restarts == 0 {
        return Err(Error::invalid("restarts must be at least 1"));
    }
    let mut best = kmeans(x, k, rng.fork(0), max_iters, tol)?;
    for r in 1..restarts {
        let run = kmeans(x, k, rng.fork(r as u64), max_iters, tol)?;
        if run.inertia < best.inertia {
            best = run;
        }
    }
    Ok(best)
}

/// Maps each row of `x` to its nearest center (squared Euclidean distance,
/// lowest index on ties).
pub fn assign_nearest(x: &Matrix, centers: &Matrix) -> Result<Vec<usize>> {
    if centers.rows() == 0 {
        return Err(Error::invalid("no centers"));
    }
    if centers.cols() != x.cols() {
        return Err(Error::invalid(format!(
            "dimension mismatch: samples have {} columns, centers {}",
            x.cols(),
            centers.cols()
        )));
    }
    Ok(nearest_with_dist(x, centers).0)
}

fn nearest_with_dist(x: &Matrix, centers: &Matrix) -> (Vec<usize>, Vec<f64>) {
    let work = centers.rows() * x.cols();
    parallel::map_range(x.rows(), work, |i| nearest_one(x.row(i), centers))
        .into_iter()
        .unzip()
}

#[inline]
fn nearest_one(p: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centers.row_iter().enumerate() {
        let d = squared_distance(p, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    (best, best_d)
}

fn plus_plus_seed(x: &Matrix, k: usize, rng: &mut RngState) -> Matrix {
    let n = x.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.below(n));
    let mut d2: Vec<f64> = x.row_iter().map(|r| squared_distance(r, x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just past the final partial sum.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap_or(0))
        } else {
            // Every point coincides with a center; take unused indices in order.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(pick);
        let c = x.row(pick);
        for (d, r) in d2.iter_mut().zip(x.row_iter()) {
            *d = d.min(squared_distance(r, c));
        }
    }
    x.select_rows(&chosen)
}

fn update_centers(x: &Matrix, assignment: &[usize], dists: &[f64], k: usize) -> Matrix {
    let d = x.cols();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (row, &a) in x.row_iter().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(row) {
            *s += v;
        }
    }
    for (j, &c) in counts.iter().enumerate() {
        if c > 0 {
            let inv = c as f64;
            for s in sums.row_mut(j) {
                *s /= inv;
            }
        }
    }
    let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
    if !empty.is_empty() {
        // Farthest points first; stable order keeps this deterministic.
        let mut order: Vec<usize> = (0..x.rows()).collect();
        order.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
        for (j, &i) in empty.iter().zip(&order) {
            sums.row_mut(*j).copy_from_slice(x.row(i));
        }
    }
    sums
}

fn relative_movement(old: &Matrix, new: &Matrix) -> f64 {
    let shift: f64 = old.data().iter().zip(new.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let scale = new.frobenius_sq();
    if scale == 0.0 {
        if shift == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (shift / scale).sqrt()
    }
}
