//! Row-parallel helpers. With the `parallel` feature the closures run on the
//! rayon pool; otherwise they run in order on the calling thread. Each output
//! row is produced by exactly one closure call, so results are bit-identical
//! either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows shorter than this are not worth distributing.
const MIN_PARALLEL_WORK: usize = 1 << 14;

/// Calls `f(row_index, row)` for every `cols`-wide chunk of `out`.
pub fn for_each_row_mut<F>(out: &mut [f64], cols: usize, work_per_row: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if cols == 0 {
        return;
    }
    let rows = out.len() / cols;
    if rows * work_per_row.max(1) >= MIN_PARALLEL_WORK {
        par_rows(out, cols, f);
    } else {
        seq_rows(out, cols, f);
    }
}

/// Maps `0..n` through `f`, preserving order.
pub fn map_range<T, F>(n: usize, work_per_item: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if n * work_per_item.max(1) >= MIN_PARALLEL_WORK {
        par_map(n, f)
    } else {
        (0..n).map(f).collect()
    }
}

pub fn seq_rows<F>(out: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    out.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
}

#[cfg(feature = "parallel")]
pub fn par_rows<F>(out: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    out.par_chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
}

#[cfg(not(feature = "parallel"))]
pub fn par_rows<F>(out: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    seq_rows(out, cols, f)
}

#[cfg(feature = "parallel")]
fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// True when the crate was built with rayon support.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
