use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

/// Dense 5D tensor in `(batch, channel, z, y, x)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 5], v: T) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: [1; 5],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Wraps one single-channel volume as a `(1, 1, D, H, W)` tensor.
    pub fn from_volume(spatial: [usize; 3], data: &[f32]) -> Result<Self> {
        Tensor::from_vec(
            [1, 1, spatial[0], spatial[1], spatial[2]],
            data.iter().map(|&v| T::of(v as f64)).collect(),
        )
    }

    /// Stacks equally-shaped single-channel volumes into a batch.
    pub fn stack_volumes(spatial: [usize; 3], volumes: &[&[f32]]) -> Result<Self> {
        let n = spatial.iter().product::<usize>();
        let mut data = Vec::with_capacity(n * volumes.len());
        for v in volumes {
            if v.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "expected {n} voxels, got {}",
                    v.len()
                )));
            }
            data.extend(v.iter().map(|&x| T::of(x as f64)));
        }
        Tensor::from_vec([volumes.len(), 1, spatial[0], spatial[1], spatial[2]], data)
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// All channels of batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.numel() / self.batch();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.numel() / self.batch();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.as_f64() as f32).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn item_value(&self) -> T {
        self.data[0]
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    /// Channel-wise argmax per voxel, returned per batch item.
    pub fn argmax_channels(&self) -> Vec<Vec<u32>> {
        let c = self.channels();
        let v = self.voxels();
        (0..self.batch())
            .map(|n| {
                let item = self.item(n);
                (0..v)
                    .map(|i| {
                        let mut best = 0usize;
                        let mut best_v = item[i];
                        for ch in 1..c {
                            let s = item[ch * v + i];
                            if s > best_v {
                                best_v = s;
                                best = ch;
                            }
                        }
                        best as u32
                    })
                    .collect()
            })
            .collect()
    }
}
