//! Dense row-major `f64` arrays of rank 0 (scalar), 1 (vector), or 2 (matrix).

use crate::error::{Error, Result};

/// A dense row-major array. The invariant `data.len() == shape.iter().product()`
/// holds for every constructed value (an empty shape denotes a scalar with one
/// element).
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    /// Rank-0 scalar.
    pub fn scalar(v: f64) -> Self {
        Array { shape: vec![], data: vec![v] }
    }

    /// Rank-1 vector owning `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Array { shape: vec![data.len()], data }
    }

    /// Rank-2 matrix from row-major `data`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::validation(format!(
                "matrix: {} elements given for shape [{rows}, {cols}]",
                data.len()
            )));
        }
        Ok(Array { shape: vec![rows, cols], data })
    }

    /// Array of zeros with the given shape (ranks 0..=2).
    pub fn zeros(shape: &[usize]) -> Self {
        Array::filled(shape, 0.0)
    }

    /// Array filled with `v`.
    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Total element count.
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single element of a rank-0 array.
    pub fn as_scalar(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::validation(format!(
                "as_scalar: array has shape {:?}",
                self.shape
            )))
        }
    }

    /// Element of a rank-2 array at (row, col). Panics out of bounds.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn set_at(&mut self, row: usize, col: usize, v: f64) {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        self.data[row * cols + col] = v;
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of all elements.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
