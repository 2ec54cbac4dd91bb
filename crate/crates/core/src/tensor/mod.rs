//! Dense tensors and the hand-differentiated ops the gating pipeline is built from.
//!
//! There is no tape: every op exposes a forward function and a matching backward
//! function, and composites chain them explicitly.

mod conv;
pub mod gradcheck;
pub(crate) mod ops;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeom, ConvGrads, ConvWeight};
pub(crate) use conv::{corr_acc, corr_transpose_acc, corr_weight_grad, PlaneGeom};
pub use gradcheck::{finite_diff_check, FdReport};
pub use ops::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, global_avg_pool,
    global_avg_pool_backward, linear, linear_backward, relu, relu_backward, sigmoid,
    sigmoid_backward, softmax_cross_entropy, BatchNormCache, BnStats, LinearGrads, BN_EPS,
    BN_MOMENTUM,
};

use crate::error::{MsgcError, Result};

/// Rank-4 activation tensor laid out row-major over `(N, C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: f64) -> Self {
        Self { n, c, h, w, data: vec![value; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(MsgcError::shape(format!(
                "tensor4 ({n},{c},{h},{w}) needs {} values, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn from_fn(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(i, j, y, x));
                    }
                }
            }
        }
        Self { n, c, h, w, data }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let len = self.plane_len();
        let start = (n * self.c + c) * len;
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let len = self.plane_len();
        let start = (n * self.c + c) * len;
        &mut self.data[start..start + len]
    }

    /// Copies the listed samples into a new batch.
    pub fn select_samples(&self, indices: &[usize]) -> Tensor4 {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor4 { n: indices.len(), c: self.c, h: self.h, w: self.w, data }
    }

    pub fn same_shape(&self, other: &Tensor4) -> bool {
        self.shape() == other.shape()
    }

    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        if !self.same_shape(other) {
            return Err(MsgcError::shape(format!(
                "add {:?} += {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MsgcError::shape(format!(
                "tensor2 ({rows},{cols}) needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn max_abs_diff(&self, other: &Tensor2) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
