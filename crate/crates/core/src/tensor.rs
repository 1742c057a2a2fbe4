//! Dense row-major `f32` tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major N-dimensional array of `f32`.
///
/// `shape.iter().product() == data.len()` always holds; every extent is positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid("tensor", format!("invalid shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        assert!(numel > 0, "tensor extents must be positive: {shape:?}");
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at each flat index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert!(numel > 0, "tensor extents must be positive: {shape:?}");
        Self {
            shape,
            data: (0..numel).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Interprets the tensor as `[N, C, H, W]`.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            other => Err(Error::invalid(
                "dims4",
                format!("expected a rank-4 tensor, got {other:?}"),
            )),
        }
    }

    /// Interprets the tensor as a single `[H, W]` plane (leading unit dims allowed).
    pub fn dims2(&self) -> Result<[usize; 2]> {
        let r = self.shape.len();
        if r < 2 || self.shape[..r - 2].iter().any(|&d| d != 1) {
            return Err(Error::invalid(
                "dims2",
                format!("expected a single 2D plane, got {:?}", self.shape),
            ));
        }
        Ok([self.shape[r - 2], self.shape[r - 1]])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn item(&self) -> Option<f32> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Channels `[start, end)` of an `[N, C, H, W]` tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.dims4()?;
        if start >= end || end > c {
            return Err(Error::invalid(
                "slice_channels",
                format!("range {start}..{end} out of bounds for {c} channels"),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (end - start) * plane);
        for b in 0..n {
            let base = b * c * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Tensor::new(vec![n, end - start, h, w], data)
    }

    /// Concatenates two `[N, C, H, W]` tensors along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let [na, ca, ha, wa] = a.dims4()?;
        let [nb, cb, hb, wb] = b.dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape("concat_channels", a.shape(), b.shape()));
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for n in 0..na {
            data.extend_from_slice(&a.data[n * ca * plane..(n + 1) * ca * plane]);
            data.extend_from_slice(&b.data[n * cb * plane..(n + 1) * cb * plane]);
        }
        Tensor::new(vec![na, ca + cb, ha, wa], data)
    }

    /// Item `index` of the leading (batch) axis, keeping a unit batch dim.
    pub fn batch_item(&self, index: usize) -> Result<Tensor> {
        let n = self.shape[0];
        if index >= n {
            return Err(Error::invalid(
                "batch_item",
                format!("index {index} out of range for batch of {n}"),
            ));
        }
        let stride = self.numel() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(shape, self.data[index * stride..(index + 1) * stride].to_vec())
    }

    /// Stacks equally shaped tensors along the leading axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack_batch", "no items"))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for item in items {
            if item.shape != first.shape {
                return Err(Error::shape("stack_batch", &first.shape, &item.shape));
            }
            data.extend_from_slice(&item.data);
        }
        shape[0] *= items.len();
        Tensor::new(shape, data)
    }
}
