//! Execution helpers: data-parallel loops with a sequential fallback.
//!
//! All heavy loops in this crate (sweep batches, conv kernels, batch-norm
//! statistics, dataset collection) go through the helpers below. With the
//! default `parallel` feature they fan out over rayon; without it they run
//! as plain loops. Work is always split into *fixed-size* chunks whose
//! partial results are reduced sequentially in chunk order, so results are
//! bit-identical for any thread count, including one.

use std::ops::Range;

/// Reads the `DPLX_THREADS` override. `Ok(None)` when unset.
pub fn env_thread_override() -> Result<Option<usize>, String> {
    match std::env::var("DPLX_THREADS") {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(format!("DPLX_THREADS must be a positive integer, got {s:?}")),
        },
    }
}

/// Applies the `DPLX_THREADS` override to the global thread pool.
///
/// Call once at process start. A second call (or a pool that already
/// exists) is harmless. Without the `parallel` feature the override is
/// validated but otherwise ignored.
pub fn init_from_env() -> Result<(), String> {
    let n = env_thread_override()?;
    #[cfg(feature = "parallel")]
    if let Some(n) = n {
        // Ignore "already built": tests may race to initialise the pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

/// Number of worker threads the helpers will use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

fn ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    assert!(chunk > 0);
    (0..n.div_ceil(chunk))
        .map(|i| i * chunk..((i + 1) * chunk).min(n))
        .collect()
}

/// Maps fixed chunks `[i*chunk, (i+1)*chunk)` of `0..n` to partial values,
/// returned in chunk order. Reduce the result sequentially to stay
/// deterministic across thread counts.
pub fn map_ranges<U, F>(n: usize, chunk: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(Range<usize>) -> U + Sync + Send,
{
    let rs = ranges(n, chunk);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        rs.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        rs.into_iter().map(f).collect()
    }
}

/// Runs `f(chunk_index, slice)` over consecutive `chunk_len`-sized pieces
/// of `out` (the last piece may be shorter). Pieces are disjoint, so this
/// is deterministic regardless of scheduling.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk_len).enumerate().for_each(|(i, s)| f(i, s));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk_len).enumerate().for_each(|(i, s)| f(i, s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_ranges_covers_everything_in_order() {
        let parts = map_ranges(10, 3, |r| r.clone());
        assert_eq!(parts, vec![0..3, 3..6, 6..9, 9..10]);
    }

    #[test]
    fn chunked_sum_matches_sequential_sum() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let seq: f64 = xs.iter().sum();
        let partials = map_ranges(xs.len(), 37, |r| xs[r].iter().sum::<f64>());
        let par: f64 = partials.iter().sum();
        // Same chunking => same rounding, independent of thread count.
        let partials2 = map_ranges(xs.len(), 37, |r| xs[r].iter().sum::<f64>());
        assert_eq!(par, partials2.iter().sum::<f64>());
        assert!((par - seq).abs() < 1e-9);
    }

    #[test]
    fn for_each_chunk_mut_scales_in_place() {
        let mut xs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        for_each_chunk_mut(&mut xs, 7, |i, s| {
            for v in s.iter_mut() {
                *v += 1000.0 * i as f64;
            }
        });
        assert_eq!(xs[0], 0.0);
        assert_eq!(xs[7], 1007.0);
        assert_eq!(xs[99], 14099.0);
    }
}
