//! Deterministic data-parallel reductions.
//!
//! Partial sums are taken over fixed-size chunks and combined in index
//! order, so results are bit-identical regardless of thread count.

use rayon::prelude::*;

const CHUNK: usize = 4096;

pub(crate) fn sum_map<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partial: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut s = 0.0;
            for i in lo..hi {
                s += f(i);
            }
            s
        })
        .collect();
    partial.iter().sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    sum_map(a.len(), |i| a[i] * b[i])
}

pub(crate) fn sum_sq(a: &[f64]) -> f64 {
    sum_map(a.len(), |i| a[i] * a[i])
}

pub(crate) fn max_abs(a: &[f64]) -> f64 {
    a.par_chunks(CHUNK)
        .map(|c| c.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .reduce(|| 0.0, f64::max)
}
