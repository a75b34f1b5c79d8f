//! Dense row-major tensor container.
//!
//! `Tensor<T>` is the carrier for every array in the library: masks, logits,
//! probabilities, features, weight maps. Data is stored contiguously in
//! row-major (C) order; a tensor is an immutable value once constructed and
//! can be shared read-only across threads.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Copy> Tensor<T> {
    /// Builds a tensor from a shape and a row-major buffer.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(self.shape.iter()).enumerate() {
            debug_assert!(ix < dim, "index {} out of bounds at axis {}", ix, i);
            off = off * dim + ix;
        }
        off
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, value: T) {
        debug_assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        self.data[i * w + j] = value;
    }

    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> T {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    #[inline]
    pub fn set3(&mut self, i: usize, j: usize, k: usize, value: T) {
        debug_assert_eq!(self.shape.len(), 3);
        let (d1, d2) = (self.shape[1], self.shape[2]);
        self.data[(i * d1 + j) * d2 + k] = value;
    }

    /// Contiguous innermost row at a 3-D position, e.g. the class axis of a
    /// `[H, W, C]` logits map.
    #[inline]
    pub fn row3(&self, i: usize, j: usize) -> &[T] {
        debug_assert_eq!(self.shape.len(), 3);
        let c = self.shape[2];
        let start = (i * self.shape[1] + j) * c;
        &self.data[start..start + c]
    }

    #[inline]
    pub fn row3_mut(&mut self, i: usize, j: usize) -> &mut [T] {
        debug_assert_eq!(self.shape.len(), 3);
        let c = self.shape[2];
        let start = (i * self.shape[1] + j) * c;
        &mut self.data[start..start + c]
    }

    pub fn map<U: Copy, F: Fn(T) -> U>(&self, f: F) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

impl Tensor<f32> {
    /// Upcasts to the canonical compute dtype.
    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|x| x as f64)
    }
}

impl Tensor<f64> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Tensor<u8> {
    /// Requires every element to be 0 or 1.
    pub fn expect_binary(&self, field: &'static str) -> Result<()> {
        if self.data.iter().any(|&v| v > 1) {
            return Err(Error::validation(field, "mask values must be 0 or 1"));
        }
        Ok(())
    }
}
