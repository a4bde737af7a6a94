//! Matrix-multiply kernels shared by forward and backward passes.
//!
//! Loop orders are chosen so the inner loops stream rows contiguously and
//! autovectorize. Summation orders are fixed by the code path, which is what
//! makes fixed-seed runs bit-identical. Each kernel charges m*k*n MACs.

use crate::macs;
use crate::scalar::Scalar;

/// out += a(m x k) * b(k x n), row-major.
pub fn matmul_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    macs::add((m * k * n) as u64);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut l = 0;
        // Four panels of b per pass keeps the out row hot in registers.
        while l + 4 <= k {
            let (a0, a1, a2, a3) = (arow[l], arow[l + 1], arow[l + 2], arow[l + 3]);
            let b0 = &b[l * n..(l + 1) * n];
            let b1 = &b[(l + 1) * n..(l + 2) * n];
            let b2 = &b[(l + 2) * n..(l + 3) * n];
            let b3 = &b[(l + 3) * n..(l + 4) * n];
            for j in 0..n {
                orow[j] = orow[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            l += 4;
        }
        while l < k {
            let al = arow[l];
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += al * brow[j];
            }
            l += 1;
        }
    }
}

/// out += a(m x k) * b(n x k)^T: rows of both operands are dotted.
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    macs::add((m * k * n) as u64);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            orow[j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out += a(m x k)^T * b(m x n): the gradient kernel for matmul weights.
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    macs::add((m * k * n) as u64);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            let orow = &mut out[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += ail * brow[j];
            }
        }
    }
}

/// Dot product with eight independent accumulators so the reduction pipelines;
/// the combination order is fixed, not input-dependent.
pub fn dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [S::ZERO; 8];
    let chunks = x.len() / 8;
    for c in 0..chunks {
        let xs = &x[c * 8..(c + 1) * 8];
        let ys = &y[c * 8..(c + 1) * 8];
        for lane in 0..8 {
            acc[lane] = acc[lane] + xs[lane] * ys[lane];
        }
    }
    let mut tail = S::ZERO;
    for i in chunks * 8..x.len() {
        tail = tail + x[i] * y[i];
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    ((s01 + s23) + (s45 + s67)) + tail
}
