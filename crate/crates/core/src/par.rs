//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers dispatch to rayon, otherwise they
//! run sequentially. Every helper writes results in input order, so output
//! never depends on scheduling. Parallel dispatch can also be switched off at
//! runtime with [`set_enabled`], which the benches use to compare both paths
//! inside one binary.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Work below this many scalar operations stays on the calling thread.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Toggle parallel dispatch at runtime. No effect without the `parallel` feature.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::SeqCst);
}

pub fn is_enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Map over a slice, collecting in input order.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_enabled() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Map over `0..n`, collecting in index order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Run `f(chunk_index, chunk)` over consecutive `chunk_len`-sized chunks of
/// `out`. `work` is the caller's estimate of total scalar operations and
/// decides whether spawning is worthwhile.
pub fn for_each_chunk_mut<F>(out: &mut [f64], chunk_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_enabled() && work >= MIN_PARALLEL_WORK && out.len() > chunk_len {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = work;
    out.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let xs: Vec<u32> = (0..1000).collect();
        let ys = map(&xs, |x| x * 2);
        assert!(ys.iter().enumerate().all(|(i, &y)| y == 2 * i as u32));
    }

    #[test]
    fn chunked_matches_sequential() {
        let mut a = vec![0.0; 1 << 16];
        for_each_chunk_mut(&mut a, 64, usize::MAX, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 64 + j) as f64;
            }
        });
        assert!(a.iter().enumerate().all(|(i, &v)| v == i as f64));
    }
}
