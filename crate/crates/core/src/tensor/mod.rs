//! Dense f64 tensors and a reverse-mode tape over them.

mod tape;

pub use tape::{Gradients, Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{DaanError, Result};

/// Row-major dense array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(DaanError::Shape(format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DaanError::Shape(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// A `1 x n` row.
    pub fn row(data: Vec<f64>) -> Self {
        Tensor { shape: vec![1, data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Split a vector into `tokens` consecutive rows.
pub fn fold(x: &[f64], tokens: usize) -> Result<Tensor> {
    if tokens == 0 || !x.len().is_multiple_of(tokens) {
        return Err(DaanError::Shape(format!(
            "cannot fold {} elements into {tokens} tokens",
            x.len()
        )));
    }
    Tensor::matrix(tokens, x.len() / tokens, x.to_vec())
}

/// Inverse of [`fold`].
pub fn unfold(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_rows_are_contiguous() {
        let t = fold(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.at(0, 1), 2.0);
        assert_eq!(t.at(1, 0), 3.0);
        assert_eq!(unfold(&t), vec![1.0, 2.0, 3.0, 4.0]);
        let single = fold(&[5.0, 6.0, 7.0], 1).unwrap();
        assert_eq!(single.shape(), &[1, 3]);
        assert!(fold(&[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().cols(), 3);
    }
}
