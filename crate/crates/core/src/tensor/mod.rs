//! Minimal dense-tensor framework with reverse-mode gradients.
//!
//! Tensors are row-major 2D `f64` matrices (scalars are 1x1). Each forward
//! pass owns an explicit [`Graph`] tape; there is no global state, so
//! replays are deterministic and independent tapes can run concurrently over
//! a shared read-only [`ParamStore`].

mod gradcheck;
mod graph;
mod nn;
mod params;

pub use gradcheck::grad_check;
pub use graph::{Graph, NodeId};
pub use nn::{
    cross_attention, cross_attention_biased, gcn_forward, mlp_forward, Activation,
    CrossAttentionOut, GcnConfig,
};
pub use params::{load_checkpoint, save_checkpoint, MlpParams, ParamStore};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "tensor extents must be positive");
        Tensor { shape: vec![rows, cols], data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![v] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape: vec![rows, cols], data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty() && !rows[0].is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor { shape: vec![rows.len(), cols], data }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Tensor::from_rows(&[values.to_vec()])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows() && c < self.cols());
        self.data[r * self.cols() + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value-level row softmax (stable), for confidence extraction and tests.
    pub fn softmax_rows_values(&self) -> Tensor {
        let (n, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(n, c);
        for r in 0..n {
            let row = self.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out.set(r, j, e);
                sum += e;
            }
            for j in 0..c {
                let v = out.at(r, j) / sum;
                out.set(r, j, v);
            }
        }
        out
    }
}
