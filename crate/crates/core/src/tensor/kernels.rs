//! Single-threaded dense kernels. Every loop has a fixed reduction order, so
//! results are bitwise reproducible for identical inputs.

use super::Real;

const LANES: usize = 8;
const COL_BLOCK: usize = 512;
const DOT_BLOCK: usize = 1024;

/// Dot product with eight independent accumulators (vectorizes without
/// reassociating across runs).
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn transpose<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    const B: usize = 32;
    let mut dst = vec![T::zero(); rows * cols];
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    dst
}

/// `out += op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x p`.
///
/// With `trans_a` the buffer `a` is stored `k x m`; with `trans_b`, `b` is
/// stored `p x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    p: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    if m == 0 || p == 0 || k == 0 {
        return;
    }
    let a_owned;
    let a = if trans_a {
        a_owned = transpose(a, k, m);
        &a_owned[..]
    } else {
        a
    };
    if trans_b {
        gemm_nt(m, k, p, a, b, out);
    } else {
        gemm_nn(m, k, p, a, b, out);
    }
}

fn gemm_nn<T: Real>(m: usize, k: usize, p: usize, a: &[T], b: &[T], out: &mut [T]) {
    for j0 in (0..p).step_by(COL_BLOCK) {
        let j1 = (j0 + COL_BLOCK).min(p);
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let c_row = &mut out[i * p + j0..i * p + j1];
            for (kk, &aik) in a_row.iter().enumerate() {
                if aik == T::zero() {
                    continue;
                }
                axpy(aik, &b[kk * p + j0..kk * p + j1], c_row);
            }
        }
    }
}

/// `b` stored `p x k`: every output entry is a dot product of two rows.
fn gemm_nt<T: Real>(m: usize, k: usize, p: usize, a: &[T], b: &[T], out: &mut [T]) {
    for k0 in (0..k).step_by(DOT_BLOCK) {
        let k1 = (k0 + DOT_BLOCK).min(k);
        for j in 0..p {
            let b_row = &b[j * k + k0..j * k + k1];
            for i in 0..m {
                out[i * p + j] += dot(&a[i * k + k0..i * k + k1], b_row);
            }
        }
    }
}

/// Softmax over the middle extent of an `(outer, len, inner)` view.
pub(crate) fn softmax<T: Real>(x: &[T], out: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let idx = |j: usize| base + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[idx(j)]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            let inv = T::one() / total;
            for j in 0..len {
                out[idx(j)] *= inv;
            }
        }
    }
}

/// Backward of [`softmax`]: `dx = y * (dy - sum(dy * y))` per slice.
pub(crate) fn softmax_backward<T: Real>(
    y: &[T],
    dy: &[T],
    dx: &mut [T],
    outer: usize,
    len: usize,
    inner: usize,
) {
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let idx = |j: usize| base + j * inner + i;
            let mut s = T::zero();
            for j in 0..len {
                s += dy[idx(j)] * y[idx(j)];
            }
            for j in 0..len {
                dx[idx(j)] = y[idx(j)] * (dy[idx(j)] - s);
            }
        }
    }
}
