use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive};

/// Floating-point element type for model tensors.
///
/// Checkpoints and training use `f32`; `f64` exists so analytic gradients
/// can be checked against finite differences at tight tolerances.
pub trait Scalar: Float + FromPrimitive + AddAssign + Sum + Default + Debug + Send + Sync + 'static {
    fn lit(x: f64) -> Self;

    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided matrix view: `rows x cols`, element `(r, c)` at
/// `offset + r * rs + c * cs`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    /// Row-major dense `rows x cols`.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    /// Column block `[col0, col0 + cols)` of a row-major matrix with `stride` columns.
    pub fn cols(data: &'a [T], rows: usize, stride: usize, col0: usize, cols: usize) -> Self {
        Self { data, offset: col0, rows, cols, rs: stride, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `out[(r, c)] = beta * out + a @ b`, with `out` a strided mutable block.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<T: Scalar>(
    a: View<'_, T>,
    b: View<'_, T>,
    out: &mut [T],
    out_offset: usize,
    out_rs: usize,
    out_cs: usize,
    beta: T,
) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    a.check();
    b.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    let last = out_offset + (m - 1) * out_rs + (n - 1) * out_cs;
    assert!(last < out.len(), "output view out of bounds");
    // SAFETY: bounds checked above; `out` is a distinct &mut borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr().add(out_offset),
            out_rs as isize,
            out_cs as isize,
        );
    }
}

/// Dense row-major `a @ b` into a fresh buffer.
pub(crate) fn matmul<T: Scalar>(a: View<'_, T>, b: View<'_, T>) -> Vec<T> {
    let mut out = vec![T::zero(); a.rows * b.cols];
    let n = b.cols;
    gemm_into(a, b, &mut out, 0, n, 1, T::zero());
    out
}

/// Dense row-major `out += a @ b`.
pub(crate) fn matmul_acc<T: Scalar>(a: View<'_, T>, b: View<'_, T>, out: &mut [T]) {
    let n = b.cols;
    gemm_into(a, b, out, 0, n, 1, T::one());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_views_multiply() {
        // a: 2x3, b: 2x3 -> a @ b^T is 2x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 1.0, 0.0, 1.0, 0.0];
        let c = matmul(View::dense(&a, 2, 3), View::dense(&b, 2, 3).t());
        assert_eq!(c, vec![4.0, 2.0, 10.0, 5.0]);
        let col = View::cols(&a, 2, 3, 1, 2);
        let d = matmul(col.t(), View::dense(&[1.0, 1.0], 2, 1));
        assert_eq!(d, vec![7.0, 9.0]);
    }
}
