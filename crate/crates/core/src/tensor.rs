//! Dense row-major tensors.
//!
//! A [`Tensor`] is an immutable value: the buffer is shared via `Arc` and
//! cloning is cheap. Gradients live on the recording tape, keyed by buffer
//! identity, so the same parameter tensor can flow through many recordings.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::BadShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Matrix constructor; all internal tensors are rank-2.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: Arc::new(vec![T::zero(); rows * cols]),
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1, 1],
            data: Arc::new(vec![v]),
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            shape: vec![r, c],
            data: Arc::new(data),
        }
    }

    /// Standard-normal init scaled by `std`. Samples are drawn at 64-bit and
    /// narrowed, so a given seed yields the same values at both precisions.
    pub fn randn<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                T::from_f64(v * std)
            })
            .collect();
        Self {
            shape: vec![rows, cols],
            data: Arc::new(data),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    /// Identity of the underlying buffer; the tape keys nodes on this.
    #[inline]
    pub(crate) fn buf_id(&self) -> usize {
        Arc::as_ptr(&self.data) as *const () as usize
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    /// Mutable view for optimizers; copies only if the buffer is shared.
    pub fn make_mut(&mut self) -> &mut [T] {
        if Arc::get_mut(&mut self.data).is_none() {
            let copy: Vec<T> = (*self.data).clone();
            self.data = Arc::new(copy);
        }
        Arc::get_mut(&mut self.data).expect("unshared after copy")
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Copy of the sub-matrix rows `r0..r1`, cols `c0..c1` (analysis
    /// helper; not a differentiable op).
    pub fn block(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Tensor<T> {
        assert!(r0 <= r1 && r1 <= self.rows() && c0 <= c1 && c1 <= self.cols());
        let mut data = Vec::with_capacity((r1 - r0) * (c1 - c0));
        for i in r0..r1 {
            data.extend_from_slice(&self.data[i * self.cols() + c0..i * self.cols() + c1]);
        }
        Tensor {
            shape: vec![r1 - r0, c1 - c0],
            data: Arc::new(data),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}
