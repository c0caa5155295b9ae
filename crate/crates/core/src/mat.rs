//! Dense row-major f64 matrix and the handful of kernels the encoders and
//! losses need. Inner loops run over contiguous rows so they autovectorize.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec shape mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scale(&mut self, c: f64) {
        for x in &mut self.data {
            *x *= c;
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Fraction of entries that differ between two same-shape matrices.
    pub fn fraction_differing(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let n = self.data.len().max(1);
        let diff = self.data.iter().zip(&other.data).filter(|(a, b)| a != b).count();
        diff as f64 / n as f64
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// out[n] = a.row(n) * w^T + b, with `w` stored out_dim x in_dim.
/// This is the affine layer orientation: each output coordinate is a dot
/// product of two contiguous rows.
pub fn affine_forward(a: &Mat, w: &Mat, b: &[f64], out: &mut Mat) {
    assert_eq!(a.cols(), w.cols(), "affine in-dim mismatch");
    assert_eq!(w.rows(), b.len(), "affine out-dim mismatch");
    assert_eq!((out.rows(), out.cols()), (a.rows(), w.rows()));
    for n in 0..a.rows() {
        let x = a.row(n);
        let o = out.row_mut(n);
        for (j, oj) in o.iter_mut().enumerate() {
            *oj = dot(x, w.row(j)) + b[j];
        }
    }
}

/// grad_w += g^T * a  (g: N x out, a: N x in, grad_w: out x in)
pub fn accumulate_outer(g: &Mat, a: &Mat, grad_w: &mut Mat) {
    assert_eq!(g.rows(), a.rows());
    assert_eq!((grad_w.rows(), grad_w.cols()), (g.cols(), a.cols()));
    for n in 0..g.rows() {
        let grow = g.row(n);
        let arow = a.row(n);
        for (j, &gj) in grow.iter().enumerate() {
            axpy(gj, arow, grad_w.row_mut(j));
        }
    }
}

/// out[n] = g.row(n) * w  (g: N x out, w: out x in, out: N x in)
pub fn matmul_rows(g: &Mat, w: &Mat, out: &mut Mat) {
    assert_eq!(g.cols(), w.rows());
    assert_eq!((out.rows(), out.cols()), (g.rows(), w.cols()));
    for n in 0..g.rows() {
        let orow = out.row_mut(n);
        orow.fill(0.0);
        let grow = g.row(n);
        for (j, &gj) in grow.iter().enumerate() {
            axpy(gj, w.row(j), orow);
        }
    }
}

/// Column sums of g into out (length g.cols()).
pub fn column_sums(g: &Mat, out: &mut [f64]) {
    assert_eq!(g.cols(), out.len());
    out.fill(0.0);
    for row in g.iter_rows() {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_matches_hand_arithmetic() {
        // 1x2 input, 3x2 weights, bias
        let a = Mat::from_vec(1, 2, vec![1.0, 2.0]);
        let w = Mat::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = [0.5, -0.5, 0.0];
        let mut out = Mat::zeros(1, 3);
        affine_forward(&a, &w, &b, &mut out);
        assert_eq!(out.row(0), &[1.5, 1.5, 3.0]);
    }

    #[test]
    fn outer_accumulation() {
        let g = Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let a = Mat::from_vec(2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        let mut gw = Mat::zeros(2, 3);
        accumulate_outer(&g, &a, &mut gw);
        // gw[j][k] = sum_n g[n][j] a[n][k]
        assert_eq!(gw.row(0), &[1.0, 3.0, 4.0]);
        assert_eq!(gw.row(1), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn matmul_rows_matches() {
        let g = Mat::from_vec(1, 2, vec![2.0, -1.0]);
        let w = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut out = Mat::zeros(1, 3);
        matmul_rows(&g, &w, &mut out);
        assert_eq!(out.row(0), &[-2.0, -1.0, 0.0]);
    }

    #[test]
    fn column_sum_matches() {
        let g = Mat::from_vec(2, 2, vec![1.0, 2.0, 10.0, 20.0]);
        let mut out = [0.0; 2];
        column_sums(&g, &mut out);
        assert_eq!(out, [11.0, 22.0]);
    }
}
