//! Dense row-major f64 matrices and the handful of kernels the tape needs.
//!
//! Everything is 64-bit: the losses are differences of trajectory
//! log-densities, where f32 cancellation is a real risk.

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor size mismatch");
        Tensor { rows, cols, data }
    }

    /// 1 x n row vector.
    pub fn row_vec(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    /// n x 1 column vector.
    pub fn col_vec(data: Vec<f64>) -> Self {
        Tensor {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Copy of rows [start, end).
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        Tensor {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Four independent accumulators so the reduction vectorizes; the
/// summation order is fixed, so results stay bit-reproducible.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let quads = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..quads {
        let j = 4 * i;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut s = (s0 + s2) + (s1 + s3);
    for j in 4 * quads..n {
        s += a[j] * b[j];
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] += alpha * x[i];
    }
}

/// y = x · Wᵀ + b, with W stored (out, in) row-major.
///
/// W is transposed once per call so the inner loop is a contiguous
/// axpy into the output row (the layout the vectorizer likes); the
/// transpose cost is negligible against the O(rows·out·in) work.
pub fn affine_forward(x: &Tensor, w: &[f64], b: &[f64], out_dim: usize) -> Tensor {
    let (rows, k) = (x.rows, x.cols);
    debug_assert_eq!(w.len(), out_dim * k);
    debug_assert_eq!(b.len(), out_dim);
    let mut y = Tensor::zeros(rows, out_dim);
    if rows == 1 || out_dim < 8 {
        for r in 0..rows {
            let xr = x.row(r);
            let yr = y.row_mut(r);
            for o in 0..out_dim {
                yr[o] = b[o] + dot(xr, &w[o * k..(o + 1) * k]);
            }
        }
        return y;
    }
    let mut wt = vec![0.0; k * out_dim]; // (in, out)
    for o in 0..out_dim {
        for j in 0..k {
            wt[j * out_dim + o] = w[o * k + j];
        }
    }
    for r in 0..rows {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        yr.copy_from_slice(b);
        for (j, &xv) in xr.iter().enumerate() {
            if xv != 0.0 {
                axpy(xv, &wt[j * out_dim..(j + 1) * out_dim], yr);
            }
        }
    }
    y
}

/// dX += dY · W  (W stored (out, in) row-major).
pub fn affine_grad_input(dy: &Tensor, w: &[f64], in_dim: usize, dx: &mut Tensor) {
    debug_assert_eq!(dx.cols, in_dim);
    let out_dim = dy.cols;
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let dxr = dx.row_mut(r);
        for o in 0..out_dim {
            axpy(dyr[o], &w[o * in_dim..(o + 1) * in_dim], dxr);
        }
    }
}

/// dW += dYᵀ · X and db += column sums of dY.
pub fn affine_grad_params(dy: &Tensor, x: &Tensor, dw: &mut [f64], db: &mut [f64]) {
    let (out_dim, k) = (dy.cols, x.cols);
    debug_assert_eq!(dw.len(), out_dim * k);
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xr = x.row(r);
        for o in 0..out_dim {
            let g = dyr[o];
            if g != 0.0 {
                axpy(g, xr, &mut dw[o * k..(o + 1) * k]);
            }
            db[o] += g;
        }
    }
}
