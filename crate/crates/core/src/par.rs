//! Deterministic data-parallel primitives.
//!
//! With the `parallel` feature (default) the dispatching entry points run on
//! rayon; without it they run the sequential twins. Work is split by a chunk
//! policy that depends only on problem shape, never on worker count, and every
//! output element is owned by exactly one chunk, so the parallel and sequential
//! paths produce bit-identical results.

use ndarray::{linalg::general_mat_mul, Array2, ArrayView2, Axis};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Row-chunk size for matrix products: at most 16 chunks, at least 8 rows each.
fn row_chunk(rows: usize) -> usize {
    (rows.div_ceil(16)).max(8)
}

/// `a @ b`, sequential, chunk-by-chunk (same chunking as the parallel path).
pub fn matmul_seq(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (n, m) = (a.nrows(), b.ncols());
    let chunk = row_chunk(n);
    let mut out = Array2::<f64>::zeros((n, m));
    for (mut oc, ac) in out
        .axis_chunks_iter_mut(Axis(0), chunk)
        .zip(a.axis_chunks_iter(Axis(0), chunk))
    {
        general_mat_mul(1.0, &ac, &b, 0.0, &mut oc);
    }
    out
}

/// `a @ b` with row chunks dispatched to rayon.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (n, m) = (a.nrows(), b.ncols());
    let chunk = row_chunk(n);
    let mut out = Array2::<f64>::zeros((n, m));
    let jobs: Vec<_> = out
        .axis_chunks_iter_mut(Axis(0), chunk)
        .zip(a.axis_chunks_iter(Axis(0), chunk))
        .collect();
    jobs.into_par_iter().for_each(|(mut oc, ac)| {
        general_mat_mul(1.0, &ac, &b, 0.0, &mut oc);
    });
    out
}

/// `a @ b` via the path selected by the `parallel` feature.
///
/// Products below the threshold run as one plain GEMM call: row-chunking
/// repacks the right-hand matrix per chunk, which only pays for itself once
/// the product is large. Model-sized products land below the threshold, so
/// training parallelism comes from batch-level `map_ordered` instead, and
/// nested rayon oversubscription is avoided.
const PAR_FLOP_THRESHOLD: usize = 32_000_000;

pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(
        a.ncols(),
        b.nrows(),
        "matmul: inner dims {} vs {}",
        a.ncols(),
        b.nrows()
    );
    #[cfg(feature = "parallel")]
    {
        if a.nrows() * a.ncols() * b.ncols() >= PAR_FLOP_THRESHOLD {
            return matmul_par(a, b);
        }
    }
    let mut out = Array2::<f64>::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, &a, &b, 0.0, &mut out);
    out
}

/// Order-preserving map, sequential.
pub fn map_ordered_seq<I: Sync, O: Send, F: Fn(&I) -> O + Sync + Send>(items: &[I], f: F) -> Vec<O> {
    items.iter().map(f).collect()
}

/// Order-preserving map on rayon. Collection keeps input order, so results are
/// identical to the sequential path.
#[cfg(feature = "parallel")]
pub fn map_ordered_par<I: Sync, O: Send, F: Fn(&I) -> O + Sync + Send>(items: &[I], f: F) -> Vec<O> {
    items.par_iter().map(f).collect()
}

/// Order-preserving map via the path selected by the `parallel` feature.
pub fn map_ordered<I: Sync, O: Send, F: Fn(&I) -> O + Sync + Send>(items: &[I], f: F) -> Vec<O> {
    #[cfg(feature = "parallel")]
    {
        map_ordered_par(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_ordered_seq(items, f)
    }
}
