//! Dense row-major `f64` arrays.
//!
//! Feature maps are rank-4 tensors laid out channels-last: `(batch, height, width, channels)`.
//! Token matrices used by attention are rank-3 `(batch, tokens, channels)` views of the same
//! buffer, so flattening spatial positions into tokens is a free reshape in row-major order.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
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

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// `(batch, height, width, channels)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, h, w, c] => Ok((b, h, w, c)),
            _ => Err(shape_err!("expected a rank-4 feature map, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element access for rank-4 feature maps.
    pub fn at4(&self, b: usize, y: usize, x: usize, c: usize) -> f64 {
        let [_, h, w, ch] = self.shape[..] else {
            panic!("at4 on rank-{} tensor", self.shape.len());
        };
        self.data[((b * h + y) * w + x) * ch + c]
    }

    /// Largest absolute element-wise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| libm::fabs(a - b))
                .fold(0.0, f64::max),
        )
    }

    /// Extracts batch item `index` of a rank-4 tensor as a batch of one.
    pub fn batch_item(&self, index: usize) -> Result<Tensor> {
        let (b, h, w, c) = self.dims4()?;
        if index >= b {
            return Err(shape_err!("batch index {} out of range for batch {}", index, b));
        }
        let n = h * w * c;
        Tensor::new([1, h, w, c], self.data[index * n..(index + 1) * n].to_vec())
    }

    /// Stacks rank-4 tensors with matching `(H, W, C)` along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| shape_err!("cannot stack an empty list"))?;
        let (_, h, w, c) = first.dims4()?;
        let mut data = Vec::with_capacity(items.len() * h * w * c);
        let mut batch = 0;
        for t in items {
            let (b, th, tw, tc) = t.dims4()?;
            if (th, tw, tc) != (h, w, c) {
                return Err(shape_err!(
                    "cannot stack {:?} with {:?}",
                    t.shape(),
                    first.shape()
                ));
            }
            batch += b;
            data.extend_from_slice(t.data());
        }
        Tensor::new([batch, h, w, c], data)
    }
}
