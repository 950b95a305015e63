//! Raw matrix kernels over row-major buffers.
//!
//! Every output element is accumulated in ascending order of the reduced
//! index starting from zero, so a strided view of a weight matrix and a
//! materialized copy of the same block produce bit-identical results.

use crate::tensor::Real;

/// A `rows x cols` block of a row-major buffer whose rows are `stride`
/// elements apart, starting at element `offset`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Block<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
}

impl<'a, T: Real> Block<'a, T> {
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            stride: cols,
            rows,
            cols,
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &'a [T] {
        let s = self.offset + r * self.stride;
        &self.data[s..s + self.cols]
    }

    /// Materialized transpose, `cols x rows`.
    pub fn transposed(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows * self.cols];
        for r in 0..self.rows {
            for (c, &v) in self.row(r).iter().enumerate() {
                out[c * self.rows + r] = v;
            }
        }
        out
    }
}

/// `out[m x n] = a[m x k] * b[k x n]`, overwriting `out`.
pub(crate) fn matmul<T: Real>(a: &[T], m: usize, b: Block<'_, T>, out: &mut [T]) {
    let (k, n) = (b.rows, b.cols);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(out.len(), m * n);
    out.fill(T::zero());
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = b.row(p);
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `grad[k x n] += a[m x k]^T * g[m x n]` where `grad` is a strided block.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_at_acc<T: Real>(
    a: &[T],
    m: usize,
    k: usize,
    g: &[T],
    n: usize,
    grad: &mut [T],
    offset: usize,
    stride: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let s = offset + p * stride;
            for (d, &gv) in grad[s..s + n].iter_mut().zip(g_row) {
                *d += a_ip * gv;
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
