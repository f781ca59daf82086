//! Dense row-major tensors in N,C,H,W layout.

use std::fmt;

use crate::error::{ensure, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        ensure!(
            shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let numel: usize = shape.iter().product();
        ensure!(
            numel == data.len(),
            "shape {shape:?} needs {numel} values, got {}",
            data.len()
        );
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "non-positive extent in {shape:?}");
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        ensure!(
            self.data.len() == 1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(
            numel == self.data.len() && shape.iter().all(|&d| d > 0),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        ensure!(
            self.shape.len() == 4,
            "expected a rank-4 tensor, got shape {:?}",
            self.shape
        );
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        ensure!(
            self.shape.len() == 2,
            "expected a rank-2 tensor, got shape {:?}",
            self.shape
        );
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        ensure!(
            self.shape == other.shape,
            "shape mismatch in accumulate: {:?} vs {:?}",
            self.shape,
            other.shape
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of batch items `[start, start + len)` along the leading axis.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Self> {
        ensure!(!self.shape.is_empty(), "slice_batch on a rank-0 tensor");
        ensure!(
            len > 0 && start + len <= self.shape[0],
            "batch slice {start}..{} out of range for {:?}",
            start + len,
            self.shape
        );
        let item: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self {
            shape,
            data: self.data[start * item..(start + len) * item].to_vec(),
        })
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack_batch(items: &[&Tensor]) -> Result<Self> {
        ensure!(!items.is_empty(), "stack_batch of nothing");
        let tail = &items[0].shape[1..];
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            ensure!(
                &t.shape[1..] == tail,
                "stack_batch shape mismatch: {:?} vs {:?}",
                t.shape,
                items[0].shape
            );
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(tail);
        Ok(Self { shape, data })
    }

    /// Rounds every value to the nearest `f32`, the precision of persisted state.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}
