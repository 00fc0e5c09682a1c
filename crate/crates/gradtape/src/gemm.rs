//! Bounds-checked strided views over row-major buffers feeding
//! `matrixmultiply`.

use crate::Scalar;

#[derive(Clone, Copy)]
pub(crate) struct View<'a, S> {
    pub data: &'a [S],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, S> View<'a, S> {
    /// Contiguous row-major matrix.
    pub fn dense(data: &'a [S], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Column block `[col0, col0 + cols)` of rows `[row0, row0 + rows)` of a
    /// row-major matrix with `stride` columns.
    pub fn block(
        data: &'a [S],
        stride: usize,
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    ) -> Self {
        Self {
            data,
            offset: row0 * stride + col0,
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
        assert!(last < self.data.len(), "view out of bounds");
    }
}

pub(crate) struct ViewMut<'a, S> {
    pub data: &'a mut [S],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, S> ViewMut<'a, S> {
    pub fn dense(data: &'a mut [S], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn block(
        data: &'a mut [S],
        stride: usize,
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    ) -> Self {
        Self {
            data,
            offset: row0 * stride + col0,
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
        assert!(last < self.data.len(), "mutable view out of bounds");
    }
}

/// `c = alpha * a @ b + beta * c`
pub(crate) fn gemm<S: Scalar>(alpha: S, a: View<'_, S>, b: View<'_, S>, beta: S, c: ViewMut<'_, S>) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!(a.rows, c.rows, "output rows");
    assert_eq!(b.cols, c.cols, "output cols");
    a.check();
    b.check();
    c.check();
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: every view was bounds-checked above against its backing slice,
    // and `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        S::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}
