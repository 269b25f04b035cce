//! Dense row-major matrix kernels.
//!
//! These are the throughput-critical inner loops (the radiance-field decoder
//! runs ~1.4 G multiply-adds per full-frame forward). They are written as
//! slice-zip loops with small fixed inner dimensions so LLVM autovectorizes
//! them; do not introduce bounds-checked indexing in the inner loops.

use super::real::Real;

/// `out = a * b`, `a: [m,k]`, `b: [k,n]`, `out: [m,n]` (overwritten).
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(F::ZERO);
    matmul_acc(a, b, m, k, n, out);
}

/// `out += a * b` without zeroing.
pub fn matmul_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == F::ZERO {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a * b^T`, `a: [m,n]`, `b: [k,n]`, `out: [m,k]`.
///
/// Rows of `a` that are entirely zero are skipped: in backward passes most
/// adjoint rows are zero (losses only touch content rays and patch pixels),
/// which makes this the difference between a ~0.5 s and a ~1 s step.
pub fn matmul_bt_acc<F: Real>(a: &[F], b: &[F], m: usize, n: usize, k: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        if row_is_zero(arow) {
            continue;
        }
        let orow = &mut out[i * k..(i + 1) * k];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            orow[l] += dot(arow, brow);
        }
    }
}

/// `out += a^T * g`, `a: [m,k]`, `g: [m,n]`, `out: [k,n]`. Zero rows of `g`
/// are skipped (same sparsity argument as [`matmul_bt_acc`]).
pub fn matmul_at_acc<F: Real>(a: &[F], g: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        if row_is_zero(grow) {
            continue;
        }
        let arow = &a[i * k..(i + 1) * k];
        for (l, &av) in arow.iter().enumerate() {
            if av == F::ZERO {
                continue;
            }
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    // Four partial accumulators so the reduction pipelines on FMA units.
    let mut s0 = F::ZERO;
    let mut s1 = F::ZERO;
    let mut s2 = F::ZERO;
    let mut s3 = F::ZERO;
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[inline]
pub fn row_is_zero<F: Real>(row: &[F]) -> bool {
    row.iter().all(|&x| x == F::ZERO)
}

/// `y += k * x`.
pub fn axpy<F: Real>(k: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += k * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut c = vec![0.0; m * n];
        matmul(&a, &b, m, k, n, &mut c);
        let want = naive_matmul(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_variants_match_naive() {
        let (m, k, n) = (6, 4, 8);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.3).sin()).collect();
        let g: Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.9).cos()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.5).sin()).collect();

        // a * b^T == naive with b transposed
        let mut out1 = vec![0.0; m * k];
        matmul_bt_acc(&g, &b, m, n, k, &mut out1);
        let mut bt = vec![0.0; n * k];
        for l in 0..k {
            for j in 0..n {
                bt[j * k + l] = b[l * n + j];
            }
        }
        let want1 = naive_matmul(&g, &bt, m, n, k);
        for (x, y) in out1.iter().zip(&want1) {
            assert!((x - y).abs() < 1e-12);
        }

        // a^T * g
        let mut out2 = vec![0.0; k * n];
        matmul_at_acc(&a, &g, m, k, n, &mut out2);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for l in 0..k {
                at[l * m + i] = a[i * k + l];
            }
        }
        let want2 = naive_matmul(&at, &g, k, m, n);
        for (x, y) in out2.iter().zip(&want2) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
