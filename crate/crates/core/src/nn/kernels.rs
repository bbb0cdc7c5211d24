//! Dense kernels shared by forward and backward passes.

use crate::par;

/// `out[m,n] += a[m,k] * b[k,n]`, rows of `out` split across threads.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let rows_per_chunk = (m / 64).max(1);
    par::for_each_chunk_mut(out, rows_per_chunk * n, m * k * n, |ci, chunk| {
        let row0 = ci * rows_per_chunk;
        let rows = chunk.len() / n;
        rows_dispatch(&a[row0 * k..(row0 + rows) * k], b, k, n, chunk);
    });
}

/// Single-threaded variant for the many tiny products inside batched matmul.
pub(crate) fn matmul_acc_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    rows_dispatch(a, b, k, n, out);
}

#[inline(always)]
fn rows(a: &[f64], b: &[f64], k: usize, n: usize, out: &mut [f64]) {
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// Same operations in the same order, compiled with wider vectors. Rust
// never contracts `a * b + c` into an FMA, so both paths round identically.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn rows_avx2(a: &[f64], b: &[f64], k: usize, n: usize, out: &mut [f64]) {
    rows(a, b, k, n, out)
}

fn rows_dispatch(a: &[f64], b: &[f64], k: usize, n: usize, out: &mut [f64]) {
    if k == 0 || n == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { rows_avx2(a, b, k, n, out) };
        return;
    }
    rows(a, b, k, n, out)
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}
