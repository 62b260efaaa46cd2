//! Strided dense kernels shared by the eager tensor API and the tape.

/// Read-only strided view of a row-major buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Column block `[col0, col0 + width)` of a row-major matrix with `ld` columns.
    pub fn columns(data: &'a [f64], rows: usize, ld: usize, col0: usize, width: usize) -> Self {
        Self {
            data,
            offset: col0,
            rows,
            cols: width,
            row_stride: ld,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

pub(crate) struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols,
        }
    }

    pub fn columns(data: &'a mut [f64], rows: usize, ld: usize, col0: usize, width: usize) -> Self {
        Self {
            data,
            offset: col0,
            rows,
            cols: width,
            row_stride: ld,
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.last_index() < a.data.len().max(1) || k == 0);
    assert!(b.last_index() < b.data.len().max(1) || k == 0);
    let c_last = c.offset + (m - 1) * c.row_stride + (n - 1);
    assert!(c_last < c.data.len());
    if k == 0 {
        for i in 0..m {
            let row = &mut c.data[c.offset + i * c.row_stride..][..n];
            for x in row.iter_mut() {
                *x *= beta;
            }
        }
        return;
    }
    // SAFETY: every index touched by dgemm lies within the bounds asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride as isize,
            1,
        );
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn swish(z: f64) -> f64 {
    z * sigmoid(z)
}

/// In-place softmax of `row / temperature` with max subtraction.
pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let inv_t = 1.0 / temperature;
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - max) * inv_t).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// `ln Σ exp(row)` computed stably.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}
