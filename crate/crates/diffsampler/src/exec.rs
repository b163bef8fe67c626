//! Data-parallel execution over batch chunks.
//!
//! The compute-heavy inner loops (trajectory simulation, MALA sweeps, batch
//! energy evaluation) fan out over fixed-size row chunks. Chunk boundaries
//! and reduction order are independent of the thread count, so the rayon
//! path and the sequential fallback produce bit-identical results; the
//! `parallel` feature merely selects how chunk closures are executed.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use std::sync::OnceLock;

/// Rows per work unit. Fixed: it participates in nothing numeric, but
/// keeping it stable keeps per-chunk memory predictable.
pub const CHUNK_ROWS: usize = 64;

/// Execution strategy for chunked maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[cfg(feature = "parallel")]
    Rayon,
}

impl Parallelism {
    /// Rayon when compiled in and more than one worker is available,
    /// sequential otherwise. DIFFSAMPLER_THREADS caps the worker count.
    pub fn auto() -> Self {
        #[cfg(feature = "parallel")]
        {
            if thread_cap() > 1 {
                return Parallelism::Rayon;
            }
        }
        Parallelism::Sequential
    }
}

/// Worker cap from DIFFSAMPLER_THREADS, defaulting to the machine's
/// available parallelism.
pub fn thread_cap() -> usize {
    static CAP: OnceLock<usize> = OnceLock::new();
    *CAP.get_or_init(|| {
        std::env::var("DIFFSAMPLER_THREADS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            })
    })
}

#[cfg(feature = "parallel")]
fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(thread_cap())
            .build()
            .expect("failed to build worker pool")
    })
}

/// Split `n` rows into (start, end) chunks of CHUNK_ROWS.
pub fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    chunk_ranges_sized(n, CHUNK_ROWS)
}

pub fn chunk_ranges_sized(n: usize, size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + size).min(n);
        out.push((start, end));
        start = end;
    }
    out
}

/// Map `f` over index range 0..n, collecting results in order.
///
/// `f` must be a pure function of its index for the two modes to agree.
pub fn map_indexed<T, F>(mode: Parallelism, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        Parallelism::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => pool().install(|| (0..n).into_par_iter().map(f).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunking_covers_range() {
        let r = chunk_ranges(150);
        assert_eq!(r, vec![(0, 64), (64, 128), (128, 150)]);
        assert!(chunk_ranges(0).is_empty());
    }

    #[test]
    fn modes_agree() {
        let seq = map_indexed(Parallelism::Sequential, 37, |i| (i * i) as f64 / 3.0);
        let auto = map_indexed(Parallelism::auto(), 37, |i| (i * i) as f64 / 3.0);
        assert_eq!(seq, auto);
    }
}
