//! Data-parallel execution helpers.
//!
//! With the `parallel` feature the helpers dispatch to rayon; without it (or
//! when parallelism is switched off at runtime) they run the same chunked
//! loops sequentially. Reductions always combine fixed-size chunk partials in
//! index order, so results are bit-identical in both modes and for any
//! thread count.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk length used by every reduction.
pub const REDUCTION_CHUNK: usize = 2048;

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Turns data parallelism on or off at runtime. Has no effect when the crate
/// was built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn is_parallel() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Sizes the global worker pool. `threads <= 1` disables parallelism.
/// Returns false if the pool was already initialised with another size.
pub fn configure_threads(threads: usize) -> bool {
    set_parallel(threads > 1);
    #[cfg(feature = "parallel")]
    {
        if threads > 1 {
            return rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
                .is_ok();
        }
    }
    true
}

/// `(0..n).map(f).collect()`, possibly in parallel. Output order is by index.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Deterministic sum of `term(i)` over `0..n`.
pub fn sum_indexed<F>(n: usize, term: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let chunks = n.div_ceil(REDUCTION_CHUNK);
    let partial = |c: usize| {
        let lo = c * REDUCTION_CHUNK;
        let hi = (lo + REDUCTION_CHUNK).min(n);
        (lo..hi).map(&term).sum::<f64>()
    };
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && chunks > 1 {
            let parts: Vec<f64> = (0..chunks).into_par_iter().map(partial).collect();
            return parts.into_iter().sum();
        }
    }
    (0..chunks).map(partial).sum()
}

/// Deterministic maximum of `term(i)` over `0..n` (0 for empty ranges).
pub fn max_indexed<F>(n: usize, term: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && n > REDUCTION_CHUNK {
            return (0..n).into_par_iter().map(term).reduce(|| 0.0, f64::max);
        }
    }
    (0..n).map(term).fold(0.0, f64::max)
}

/// Applies `f` to every element of `out` with its index.
pub fn for_each_mut<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && out.len() > REDUCTION_CHUNK {
            out.par_iter_mut().enumerate().for_each(|(i, x)| f(i, x));
            return;
        }
    }
    out.iter_mut().enumerate().for_each(|(i, x)| f(i, x));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reductions_agree_between_modes() {
        let n = 10 * REDUCTION_CHUNK + 17;
        let term = |i: usize| ((i as f64) * 0.37).sin() / (1.0 + i as f64);
        let was = is_parallel();
        set_parallel(true);
        let a = sum_indexed(n, term);
        let m = max_indexed(n, term);
        set_parallel(false);
        let b = sum_indexed(n, term);
        let mm = max_indexed(n, term);
        set_parallel(was);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(m, mm);
    }

    #[test]
    fn map_keeps_order() {
        let v = map_indexed(1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
        assert_eq!(sum_indexed(0, |_| 1.0), 0.0);
    }
}
