//! Fixed-chunk parallel helpers.
//!
//! All reductions run over chunks of a fixed size and fold the per-chunk
//! partials in chunk order, so sums are bit-identical for any worker count.

use rayon::prelude::*;

/// Chunk size for parallel maps and ordered reductions. Fixed: changing it
/// changes rounding in reductions, so it is part of the numeric contract.
pub const CHUNK: usize = 8192;

/// Ordered sum: parallel per-chunk accumulation, sequential fold of the
/// per-chunk partials in index order.
pub fn chunked_sum(xs: &[f64]) -> f64 {
    xs.par_chunks(CHUNK)
        .map(|c| c.iter().sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// Ordered sum of `f(i)` over `0..len`.
pub fn chunked_sum_by(len: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    (0..len)
        .into_par_iter()
        .chunks(CHUNK)
        .map(|idx| idx.into_iter().map(&f).sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// Mean and sample standard deviation with deterministic accumulation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = chunked_sum(xs) / n;
    let ss = xs
        .par_chunks(CHUNK)
        .map(|c| c.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum::<f64>();
    let var = if xs.len() > 1 { ss / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Standard error of the mean.
pub fn standard_error(xs: &[f64]) -> f64 {
    let (_, sd) = mean_std(xs);
    sd / (xs.len() as f64).sqrt()
}

/// Elementwise parallel map writing `out[i] = f(i)`.
pub fn par_fill(out: &mut [f64], f: impl Fn(usize) -> f64 + Sync) {
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(ci, chunk)| {
        let base = ci * CHUNK;
        for (k, slot) in chunk.iter_mut().enumerate() {
            *slot = f(base + k);
        }
    });
}
