//! Pixel-space image tensors.
//!
//! Clean images live nominally in `[-1, 1]`. A [`LatentImage`] is one
//! `(channels, height, width)` image; a [`LatentBatch`] stacks `n` of them
//! contiguously (NCHW).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentImage<T = f32> {
    shape: ImageShape,
    data: Vec<T>,
}

impl<T: Scalar> LatentImage<T> {
    pub fn new(shape: ImageShape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "{} values for an image of shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: ImageShape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
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

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> LatentImage<U> {
        LatentImage {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch<T = f32> {
    n: usize,
    shape: ImageShape,
    data: Vec<T>,
}

impl<T: Scalar> LatentBatch<T> {
    pub fn new(n: usize, shape: ImageShape, data: Vec<T>) -> Result<Self> {
        if data.len() != n * shape.numel() {
            return Err(Error::Shape(format!(
                "{} values for a batch of {} images of shape {:?}",
                data.len(),
                n,
                shape
            )));
        }
        Ok(Self { n, shape, data })
    }

    pub fn zeros(n: usize, shape: ImageShape) -> Self {
        Self {
            n,
            shape,
            data: vec![T::zero(); n * shape.numel()],
        }
    }

    pub fn stack(images: &[LatentImage<T>]) -> Result<Self> {
        let shape = images
            .first()
            .map(|im| im.shape)
            .ok_or_else(|| Error::Shape("cannot stack zero images".into()))?;
        let mut data = Vec::with_capacity(images.len() * shape.numel());
        for im in images {
            if im.shape != shape {
                return Err(Error::Shape(format!(
                    "mixed image shapes {:?} and {:?}",
                    shape, im.shape
                )));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Self {
            n: images.len(),
            shape,
            data,
        })
    }

    /// Concatenates batches along the batch axis.
    pub fn concat(parts: &[&LatentBatch<T>]) -> Result<Self> {
        let shape = parts
            .first()
            .map(|b| b.shape)
            .ok_or_else(|| Error::Shape("cannot concatenate zero batches".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape != shape {
                return Err(Error::Shape("mixed image shapes in concat".into()));
            }
            data.extend_from_slice(&p.data);
            n += p.n;
        }
        Ok(Self { n, shape, data })
    }

    pub fn split_at(&self, mid: usize) -> (Self, Self) {
        let k = mid * self.shape.numel();
        (
            Self {
                n: mid,
                shape: self.shape,
                data: self.data[..k].to_vec(),
            },
            Self {
                n: self.n - mid,
                shape: self.shape,
                data: self.data[k..].to_vec(),
            },
        )
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let d = self.shape.numel();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.data[i * d..(i + 1) * d]);
        }
        Self {
            n: indices.len(),
            shape: self.shape,
            data,
        }
    }

    pub fn image(&self, i: usize) -> LatentImage<T> {
        let d = self.shape.numel();
        LatentImage {
            shape: self.shape,
            data: self.data[i * d..(i + 1) * d].to_vec(),
        }
    }

    pub fn image_data(&self, i: usize) -> &[T] {
        let d = self.shape.numel();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn images(&self) -> Vec<LatentImage<T>> {
        (0..self.n).map(|i| self.image(i)).collect()
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
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

    pub fn same_layout(&self, other: &Self) -> Result<()> {
        if self.n != other.n || self.shape != other.shape {
            return Err(Error::Shape(format!(
                "batch {}×{:?} vs {}×{:?}",
                self.n, self.shape, other.n, other.shape
            )));
        }
        Ok(())
    }

    /// `a·self + b·other`, elementwise.
    pub fn axpby(&self, a: T, other: &Self, b: T) -> Result<Self> {
        self.same_layout(other)?;
        Ok(Self {
            n: self.n,
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        })
    }

    pub fn scale(&self, a: T) -> Self {
        self.map(|v| a * v)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            n: self.n,
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn cast<U: Scalar>(&self) -> LatentBatch<U> {
        LatentBatch {
            n: self.n,
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn max_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}
