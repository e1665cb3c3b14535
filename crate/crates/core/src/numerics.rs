//! Dense matrices, the counter-based generator, and the probability
//! primitives shared by every other module.

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn require_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(p) => Err(Error::invalid(format!(
                "{what} has a non-finite entry at row {}, column {}",
                p / self.cols.max(1),
                p % self.cols.max(1)
            ))),
        }
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · otherᵀ`: rows of `self` against rows of `other`.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape_err("matmul_nt", self, other));
        }
        Ok(kernels::matmul_nt(self, other))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err("matmul", self, other));
        }
        Ok(kernels::matmul_nn(self, other))
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(shape_err("matmul_tn", self, other));
        }
        Ok(kernels::matmul_tn(self, other))
    }

    /// Adds `v` to every row.
    pub fn add_row_vector(&mut self, v: &[f64]) {
        debug_assert_eq!(v.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (x, b) in row.iter_mut().zip(v) {
                *x += b;
            }
        }
    }

    /// Column sums, accumulated in row order.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for row in self.row_iter() {
            for (acc, x) in s.iter_mut().zip(row) {
                *acc += x;
            }
        }
        s
    }

    pub fn col_means(&self) -> Vec<f64> {
        let n = self.rows.max(1) as f64;
        self.col_sums().into_iter().map(|s| s / n).collect()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

fn shape_err(op: &str, a: &Matrix, b: &Matrix) -> Error {
    Error::invalid(format!(
        "{op}: incompatible shapes {}x{} and {}x{}",
        a.rows, a.cols, b.rows, b.cols
    ))
}

/// Matrix product kernels. `seq` is always available; the top-level functions
/// dispatch to the row-parallel path when the `parallel` feature is enabled.
pub mod kernels {
    use super::Matrix;
    use crate::parallel;

    pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows, b.rows);
        parallel::for_each_row_mut(&mut out.data, b.rows, b.rows * a.cols, |i, row| {
            seq::nt_row(a, b, i, row)
        });
        out
    }

    pub fn matmul_nn(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows, b.cols);
        parallel::for_each_row_mut(&mut out.data, b.cols, a.cols * b.cols, |i, row| {
            seq::nn_row(a, b, i, row)
        });
        out
    }

    pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.cols, b.cols);
        parallel::for_each_row_mut(&mut out.data, b.cols, a.rows * b.cols, |j, row| {
            seq::tn_row(a, b, j, row)
        });
        out
    }

    /// Single-threaded reference kernels.
    pub mod seq {
        use super::Matrix;
        use crate::parallel;

        #[inline]
        pub fn dot(x: &[f64], y: &[f64]) -> f64 {
            x.iter().zip(y).map(|(a, b)| a * b).sum()
        }

        pub(crate) fn nt_row(a: &Matrix, b: &Matrix, i: usize, row: &mut [f64]) {
            let ai = a.row(i);
            for (j, out) in row.iter_mut().enumerate() {
                *out = dot(ai, b.row(j));
            }
        }

        pub(crate) fn nn_row(a: &Matrix, b: &Matrix, i: usize, row: &mut [f64]) {
            for (k, &aik) in a.row(i).iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (o, bkj) in row.iter_mut().zip(b.row(k)) {
                    *o += aik * bkj;
                }
            }
        }

        pub(crate) fn tn_row(a: &Matrix, b: &Matrix, j: usize, row: &mut [f64]) {
            for k in 0..a.rows {
                let akj = a.get(k, j);
                if akj == 0.0 {
                    continue;
                }
                for (o, bk) in row.iter_mut().zip(b.row(k)) {
                    *o += akj * bk;
                }
            }
        }

        pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
            let mut out = Matrix::zeros(a.rows, b.rows);
            parallel::seq_rows(&mut out.data, b.rows, |i, row| nt_row(a, b, i, row));
            out
        }

        pub fn matmul_nn(a: &Matrix, b: &Matrix) -> Matrix {
            let mut out = Matrix::zeros(a.rows, b.cols);
            parallel::seq_rows(&mut out.data, b.cols, |i, row| nn_row(a, b, i, row));
            out
        }
    }

    /// Always-parallel variants (sequential when the feature is off), used by
    /// the benchmarks.
    pub mod par {
        use super::Matrix;
        use crate::parallel;

        pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
            let mut out = Matrix::zeros(a.rows, b.rows);
            parallel::par_rows(&mut out.data, b.rows, |i, row| super::seq::nt_row(a, b, i, row));
            out
        }

        pub fn matmul_nn(a: &Matrix, b: &Matrix) -> Matrix {
            let mut out = Matrix::zeros(a.rows, b.cols);
            parallel::par_rows(&mut out.data, b.cols, |i, row| super::seq::nn_row(a, b, i, row));
            out
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    logits.require_finite("logits")?;
    let mut out = logits.clone();
    let cols = out.cols;
    parallel::for_each_row_mut(&mut out.data, cols, cols * 4, |_, row| softmax_in_place(row));
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_tiebreak(v: &[f64]) -> Result<usize> {
    if v.is_empty() {
        return Err(Error::invalid("argmax of an empty sequence"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("argmax over non-finite values"));
    }
    Ok(argmax_unchecked(v))
}

#[inline]
pub(crate) fn argmax_unchecked(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Row argmaxes of a probability or logit matrix.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.row_iter().map(argmax_unchecked).collect()
}

/// Result of [`l2_normalize_rows`].
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub matrix: Matrix,
    /// Indices of all-zero rows, which are passed through unchanged.
    pub degenerate_rows: Vec<usize>,
}

pub fn l2_normalize_rows(m: &Matrix) -> Normalized {
    let mut out = m.clone();
    let mut degenerate_rows = Vec::new();
    let cols = out.cols.max(1);
    for (i, row) in out.data.chunks_exact_mut(cols).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            degenerate_rows.push(i);
            continue;
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Normalized {
        matrix: out,
        degenerate_rows,
    }
}

#[inline]
pub fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum()
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based SplitMix64 stream. The whole state is `(seed, counter)`, so a
/// checkpoint can capture and restore it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    seed: u64,
    counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn from_parts(seed: u64, counter: u64) -> Self {
        Self { seed, counter }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent substream keyed by `tag`. Does not advance `self`.
    pub fn fork(&self, tag: u64) -> Self {
        Self::new(mix64(self.seed ^ mix64(tag.wrapping_add(GOLDEN_GAMMA))))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n` (`n > 0`).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's multiply-shift; the bias is below 2^-64 * n.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        rand_core::impls::fill_bytes_via_next(self, dst)
    }
}

/// Standard normal draw through `rand_distr`.
pub fn standard_normal(rng: &mut RngState) -> f64 {
    use rand::Rng;
    rng.sample(rand_distr::StandardNormal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_core::RngCore;

    #[test]
    fn softmax_uniform_row() {
        let m = Matrix::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        let p = softmax_rows(&m).unwrap();
        for &v in p.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_log_two() {
        let m = Matrix::from_rows(&[[0.0, 2f64.ln()]]).unwrap();
        let p = softmax_rows(&m).unwrap();
        assert!((p.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant_exactly() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [101.0, 102.0]]).unwrap();
        let p = softmax_rows(&m).unwrap();
        assert_eq!(p.row(0), p.row(1));
    }

    #[test]
    fn softmax_rejects_nan() {
        let m = Matrix::from_rows(&[[0.0, f64::NAN]]).unwrap();
        assert!(matches!(softmax_rows(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn argmax_cases() {
        assert_eq!(argmax_tiebreak(&[0.2, 0.5, 0.3]).unwrap(), 1);
        assert_eq!(argmax_tiebreak(&[0.5, 0.5]).unwrap(), 0);
        assert_eq!(argmax_tiebreak(&[-1.0, -1.0, -0.5]).unwrap(), 2);
        assert!(argmax_tiebreak(&[]).is_err());
    }

    #[test]
    fn normalize_cases() {
        let m = Matrix::from_rows(&[[3.0, 4.0], [0.0, 0.0], [1.0, 0.0]]).unwrap();
        let n = l2_normalize_rows(&m);
        assert!((n.matrix.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.matrix.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(n.matrix.row(1), &[0.0, 0.0]);
        assert_eq!(n.degenerate_rows, vec![1]);
        assert_eq!(n.matrix.row(2), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fuzz_rows_sum_to_one() {
        let mut rng = RngState::new(7);
        let rows: Vec<Vec<f64>> = (0..10_000)
            .map(|_| {
                let c = 1 + rng.below(12);
                let scale = 10f64.powf(rng.next_f64() * 6.0 - 3.0);
                (0..c).map(|_| standard_normal(&mut rng) * scale).collect()
            })
            .collect();
        for r in &rows {
            let m = Matrix::from_rows(&[r.as_slice()]).unwrap();
            let p = softmax_rows(&m).unwrap();
            let s: f64 = p.row(0).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(p.row(0).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = RngState::new(3);
        let mut rand_m = |r, c| Matrix::new(r, c, (0..r * c).map(|_| standard_normal(&mut rng)).collect()).unwrap();
        let a = rand_m(5, 4);
        let b = rand_m(3, 4);
        let c = rand_m(4, 6);
        let nt = a.matmul_nt(&b).unwrap();
        let explicit = a.matmul(&b.transpose()).unwrap();
        for (x, y) in nt.data().iter().zip(explicit.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let tn = a.matmul_tn(&a).unwrap();
        let explicit = a.transpose().matmul(&a).unwrap();
        for (x, y) in tn.data().iter().zip(explicit.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(kernels::seq::matmul_nn(&a, &c), kernels::par::matmul_nn(&a, &c));
        assert_eq!(kernels::seq::matmul_nt(&a, &b), kernels::par::matmul_nt(&a, &b));
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn rng_is_reproducible_and_forks_differ() {
        let mut a = RngState::new(42);
        let mut b = RngState::new(42);
        let xs: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        let mut resumed = RngState::from_parts(42, 8);
        assert_eq!(resumed.next_u64(), xs[8]);
        assert_ne!(a.fork(1), a.fork(2));
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(row in prop::collection::vec(-50.0f64..50.0, 1..8), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
            let a = softmax_rows(&Matrix::from_rows(&[row.as_slice()]).unwrap()).unwrap();
            let b = softmax_rows(&Matrix::from_rows(&[shifted.as_slice()]).unwrap()).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300) + 1e-15);
            }
        }

        #[test]
        fn softmax_shift_exact_on_dyadic_grid(
            row in prop::collection::vec(-400i32..400, 1..8),
            c in -1000i32..1000,
        ) {
            // Eighths and integer shifts keep every subtraction exact.
            let base: Vec<f64> = row.iter().map(|&v| v as f64 / 8.0).collect();
            let shifted: Vec<f64> = base.iter().map(|v| v + c as f64).collect();
            let a = softmax_rows(&Matrix::from_rows(&[base.as_slice()]).unwrap()).unwrap();
            let b = softmax_rows(&Matrix::from_rows(&[shifted.as_slice()]).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn normalize_idempotent(row in prop::collection::vec(-10.0f64..10.0, 1..10)) {
            let m = Matrix::from_rows(&[row.as_slice()]).unwrap();
            let once = l2_normalize_rows(&m).matrix;
            let twice = l2_normalize_rows(&once).matrix;
            for (x, y) in once.data().iter().zip(twice.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
