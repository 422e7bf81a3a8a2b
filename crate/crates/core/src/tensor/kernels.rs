//! Row-major matrix kernels. All of them accumulate into `c`.
//!
//! Summation order is fixed, so results are bit-reproducible for a given
//! element type.

use crate::scalar::Scalar;

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
            p += 4;
        }
        while p < k {
            let ap = a_row[p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj = *cj + ap * *bj;
            }
            p += 1;
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] = c[i * n + j] + dot(a_row, b_row);
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for p in 0..k {
        let c_row = &mut c[p * n..(p + 1) * n];
        let mut i = 0;
        while i + 4 <= m {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let b0 = &b[i * n..(i + 1) * n];
            let b1 = &b[(i + 1) * n..(i + 2) * n];
            let b2 = &b[(i + 2) * n..(i + 3) * n];
            let b3 = &b[(i + 3) * n..(i + 4) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
            i += 4;
        }
        while i < m {
            let ai = a[i * k + p];
            let b_row = &b[i * n..(i + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj = *cj + ai * *bj;
            }
            i += 1;
        }
    }
}

/// Dot product with eight independent accumulators.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (7, 9, 11), (4, 8, 4), (13, 3, 17)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 % 13) as f64 - 6.0) / 4.0).collect();
            let want = naive(m, k, n, &a, &b);

            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &a, &b, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            let bt = transpose(k, n, &b);
            let mut c = vec![0.0; m * n];
            gemm_nt(m, k, n, &a, &bt, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            let at = transpose(m, k, &a);
            let mut c = vec![0.0; m * n];
            gemm_tn(k, m, n, &at, &b, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
