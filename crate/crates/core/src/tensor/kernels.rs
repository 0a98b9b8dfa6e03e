//! Inner loops shared by the forward and backward passes.

use super::Scalar;
use crate::parallel;

/// `c[m,n] = a[m,k] · b[k,n]`, all row-major. Rows of `c` are computed
/// independently, so the parallel and sequential paths agree bit for bit.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    parallel::for_each_row(&mut c, n, |i, row| {
        matmul_row(&a[i * k..(i + 1) * k], b, row, n);
    });
    c
}

/// Single-threaded reference used by the benchmarks and by equivalence tests.
pub fn matmul_sequential<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for (i, row) in c.chunks_mut(n).enumerate() {
        matmul_row(&a[i * k..(i + 1) * k], b, row, n);
    }
    c
}

#[inline]
fn matmul_row<T: Scalar>(a_row: &[T], b: &[T], out: &mut [T], n: usize) {
    for (p, &av) in a_row.iter().enumerate() {
        if av == T::zero() {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o = *o + av * bv;
        }
    }
}

/// Batched product over `batch` independent `[m,k]·[k,n]` pairs.
pub fn batched_matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    parallel::for_each_row(&mut c, n, |r, row| {
        let bi = r / m;
        let i = r % m;
        let a_row = &a[(bi * m + i) * k..(bi * m + i + 1) * k];
        matmul_row(a_row, &b[bi * k * n..(bi + 1) * k * n], row, n);
    });
    c
}

/// Transposes the last two axes of a `[batch, rows, cols]` buffer.
pub fn transpose<T: Scalar>(x: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..batch {
        let src = &x[bi * rows * cols..(bi + 1) * rows * cols];
        let dst = &mut out[bi * rows * cols..(bi + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Scalar>(x: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}
