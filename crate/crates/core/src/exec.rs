//! Data-parallel execution with a sequential fallback.
//!
//! Work is always split into fixed-size chunks and chunk results are combined
//! in chunk order, so the rayon path and the sequential path produce
//! bit-identical floating point results.

use serde::{Deserialize, Serialize};

/// Rows per work chunk. Fixed so that reductions never depend on thread count.
pub const CHUNK_ROWS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    /// Rayon when the `parallel` feature is compiled in, sequential otherwise.
    #[default]
    Rayon,
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Rayon
    }
}

/// Maps `f` over `0..n_chunks` and returns results in chunk order.
pub fn map_chunks<T, F>(par: Parallelism, n_chunks: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        return (0..n_chunks).into_par_iter().map(f).collect();
    }
    let _ = par;
    (0..n_chunks).map(f).collect()
}

/// Splits `0..len` into `CHUNK_ROWS` ranges and maps `f` over them in order.
pub fn map_row_chunks<T, F>(par: Parallelism, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    map_row_chunks_sized(par, len, CHUNK_ROWS, f)
}

pub fn map_row_chunks_sized<T, F>(par: Parallelism, len: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    let chunk = chunk.max(1);
    let n_chunks = len.div_ceil(chunk);
    map_chunks(par, n_chunks, |c| {
        let start = c * chunk;
        f(start..(start + chunk).min(len))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sum_matches_across_modes() {
        let xs: Vec<f64> = (0..10_000)
            .map(|i| (i as f64).sin() * 1e-3 + 1.0 / (i as f64 + 1.0))
            .collect();
        let sum = |par| -> f64 {
            map_row_chunks(par, xs.len(), |r| xs[r].iter().sum::<f64>())
                .into_iter()
                .sum()
        };
        assert_eq!(
            sum(Parallelism::Sequential).to_bits(),
            sum(Parallelism::Rayon).to_bits()
        );
    }

    #[test]
    fn ranges_cover_exactly() {
        let ranges = map_row_chunks_sized(Parallelism::Sequential, 10, 4, |r| r);
        assert_eq!(ranges, vec![0..4, 4..8, 8..10]);
        assert!(map_row_chunks(Parallelism::Sequential, 0, |r| r).is_empty());
    }
}
