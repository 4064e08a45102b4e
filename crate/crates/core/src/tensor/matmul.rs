//! Row-major f64 matrix kernels. The ikj loop order keeps the inner loop a
//! contiguous multiply-add over `b` and `out`, which the compiler vectorizes;
//! rayon splits the row range when the work is large enough to pay for it.

use rayon::prelude::*;

/// Rough element-op threshold below which threading costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 16;

/// out[m,n] += a[m,k] * b[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(out_row, a_row)| row_kernel(a_row, b, k, n, out_row));
    } else {
        for (out_row, a_row) in out.chunks_mut(n).zip(a.chunks(k)) {
            row_kernel(a_row, b, k, n, out_row);
        }
    }
}

#[inline]
fn row_kernel(a_row: &[f64], b: &[f64], k: usize, n: usize, out_row: &mut [f64]) {
    for p in 0..k {
        let av = a_row[p];
        if av == 0.0 {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T  (i.e. rows of `a` dotted with rows of `b`).
pub fn matmul_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let body = |(out_row, a_row): (&mut [f64], &[f64])| {
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).zip(a.par_chunks(k)).for_each(body);
    } else {
        out.chunks_mut(n).zip(a.chunks(k)).for_each(body);
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]  (accumulation of row outer products).
///
/// Kept sequential over m so the accumulation order is fixed; callers that
/// want parallelism split over independent output buffers instead.
pub fn matmul_at_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn kernels_agree_with_naive_triple_loop() {
        use crate::rng::{Prng, Stream};
        let mut rng = Prng::new(9, Stream::Init);
        for &(m, k, n) in &[(1, 1, 1), (2, 3, 4), (5, 7, 3), (16, 16, 16), (33, 17, 9)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
            let want = naive(&a, &b, m, k, n);

            let mut got = vec![0.0; m * n];
            matmul_acc(&a, &b, m, k, n, &mut got);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }

            // b^T path: store b transposed and multiply back.
            let mut bt = vec![0.0; n * k];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let mut got_bt = vec![0.0; m * n];
            matmul_bt_acc(&a, &bt, m, k, n, &mut got_bt);
            for (g, w) in got_bt.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }

            // a^T path: (a^T)^T * b == a * b with a stored transposed.
            let mut at = vec![0.0; k * m];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            let mut got_at = vec![0.0; m * n];
            matmul_at_acc(&at, &b, k, m, n, &mut got_at);
            for (g, w) in got_at.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }
}
