//! Matrix-multiply kernels shared by forward and backward passes.
//!
//! All kernels are deterministic: each output element is reduced in a fixed
//! order regardless of the thread count. `SIGNFORGE_THREADS` caps the worker
//! threads; parallel splits partition output rows, so per-element reduction
//! order never changes.

use std::sync::OnceLock;

use super::Scalar;

/// Work threshold (multiply-adds) below which threading is never worth it.
const MIN_PARALLEL_WORK: usize = 1 << 18;

/// Number of worker threads for the kernels: `SIGNFORGE_THREADS` if set to a
/// positive integer, otherwise the machine's available parallelism.
pub fn kernel_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        if let Ok(raw) = std::env::var("SIGNFORGE_THREADS") {
            if let Ok(n) = raw.trim().parse::<usize>() {
                if n >= 1 {
                    return n;
                }
            }
        }
        std::thread::available_parallelism().map_or(1, |n| n.get())
    })
}

fn split_rows(total_work: usize, rows: usize) -> usize {
    let threads = kernel_threads();
    if threads <= 1 || total_work < MIN_PARALLEL_WORK || rows < 2 {
        1
    } else {
        threads.min(rows)
    }
}

/// Runs `body(row_offset, out_chunk)` over `out` split into `parts` row
/// ranges on scoped threads (or inline when `parts == 1`).
fn for_row_chunks<T: Scalar>(
    out: &mut [T],
    rows: usize,
    row_width: usize,
    parts: usize,
    body: impl Fn(usize, &mut [T]) + Sync,
) {
    if parts <= 1 {
        body(0, out);
        return;
    }
    let chunk_rows = rows.div_ceil(parts);
    std::thread::scope(|scope| {
        let mut rest = out;
        let mut row0 = 0;
        while !rest.is_empty() {
            let take = (chunk_rows * row_width).min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            let body = &body;
            scope.spawn(move || body(row0, head));
            row0 += chunk_rows;
            rest = tail;
        }
    });
}

/// `out[m,n] = a[m,k] * b[k,n]`, accumulating in the element type.
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(T::zero());
    let parts = split_rows(m * k * n, m);
    for_row_chunks(out, m, n, parts, |row0, chunk| {
        for (local_i, out_row) in chunk.chunks_mut(n).enumerate() {
            let i = row0 + local_i;
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = *o + aip * bv;
                }
            }
        }
    });
}

/// `out[m,n] = a[m,k] * b[n,k]^T` (dot products of rows of `a` and `b`).
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let parts = split_rows(m * k * n, m);
    for_row_chunks(out, m, n, parts, |row0, chunk| {
        for (local_i, out_row) in chunk.chunks_mut(n).enumerate() {
            let a_row = &a[(row0 + local_i) * k..(row0 + local_i + 1) * k];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &b[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&av, &bv) in a_row.iter().zip(b_row) {
                    acc = acc + av * bv;
                }
                *o = acc;
            }
        }
    });
}

/// `out[k,n] = a[m,k]^T * b[m,n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.fill(T::zero());
    let parts = split_rows(m * k * n, k);
    for_row_chunks(out, k, n, parts, |row0, chunk| {
        let rows_here = chunk.len() / n;
        for i in 0..m {
            let b_row = &b[i * n..(i + 1) * n];
            for local_p in 0..rows_here {
                let aip = a[i * k + row0 + local_p];
                if aip == T::zero() {
                    continue;
                }
                let out_row = &mut chunk[local_p * n..(local_p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = *o + aip * bv;
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    fn arb_matrix(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
        // Small deterministic pseudo-random fill; values in [-1, 1).
        let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
        (0..rows * cols)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn nn_matches_naive_triple_loop() {
        for &(m, k, n) in &[(1, 1, 1), (2, 3, 4), (5, 7, 3), (8, 8, 8)] {
            let a = arb_matrix(m, k, 11);
            let b = arb_matrix(k, n, 23);
            let mut out = vec![0.0; m * n];
            matmul_nn(&a, &b, m, k, n, &mut out);
            let want = naive_nn(&a, &b, m, k, n);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn nt_equals_nn_with_pretransposed_rhs() {
        let (m, k, n) = (4, 6, 5);
        let a = arb_matrix(m, k, 3);
        let bt = arb_matrix(n, k, 5); // stored as [n, k]
        let mut b = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                b[p * n + j] = bt[j * k + p];
            }
        }
        let mut got = vec![0.0; m * n];
        matmul_nt(&a, &bt, m, k, n, &mut got);
        let want = naive_nn(&a, &b, m, k, n);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tn_equals_nn_with_pretransposed_lhs() {
        let (m, k, n) = (6, 4, 3);
        let a = arb_matrix(m, k, 7); // [m, k], used transposed
        let b = arb_matrix(m, n, 9);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut got = vec![0.0; k * n];
        matmul_tn(&a, &b, m, k, n, &mut got);
        let want = naive_nn(&at, &b, k, m, n);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_is_neutral() {
        let n = 5;
        let mut eye = vec![0.0f64; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        let x = arb_matrix(n, n, 41);
        let mut out = vec![0.0; n * n];
        matmul_nn(&x, &eye, n, n, n, &mut out);
        assert_eq!(out, x);
        matmul_nn(&eye, &x, n, n, n, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn large_matmul_crosses_parallel_threshold_and_stays_exact() {
        // 96^3 > MIN_PARALLEL_WORK, so this exercises the threaded path when
        // more than one thread is available; results must be bitwise equal to
        // the naive order because row partitioning never reorders reductions.
        let m = 96;
        let a = arb_matrix(m, m, 1);
        let b = arb_matrix(m, m, 2);
        let mut got = vec![0.0; m * m];
        matmul_nn(&a, &b, m, m, m, &mut got);
        let want = naive_nn(&a, &b, m, m, m);
        assert_eq!(got, want);
    }
}
