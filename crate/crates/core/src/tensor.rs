//! Batched multi-channel 3D tensors used by the network engine.

use crate::error::{Error, Result};
use crate::real::Real;

/// Layout `[batch][channel][z][y][x]`, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    batch: usize,
    channels: usize,
    dims: [usize; 3],
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(batch: usize, channels: usize, dims: [usize; 3]) -> Self {
        Self {
            batch,
            channels,
            dims,
            data: vec![F::zero(); batch * channels * dims.iter().product::<usize>()],
        }
    }

    pub fn from_vec(batch: usize, channels: usize, dims: [usize; 3], data: Vec<F>) -> Result<Self> {
        let n = batch * channels * dims.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "tensor [{batch}, {channels}, {dims:?}] needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            batch,
            channels,
            dims,
            data,
        })
    }

    /// Stacks single-channel `f32` grids into a batch.
    pub fn from_grids<'a>(grids: impl IntoIterator<Item = &'a crate::volume::Grid<f32>>) -> Result<Self> {
        let mut dims = None;
        let mut data = Vec::new();
        let mut batch = 0;
        for g in grids {
            match dims {
                None => dims = Some(g.dims()),
                Some(d) if d != g.dims() => {
                    return Err(Error::Shape(format!(
                        "cannot batch grids of dims {d:?} and {:?}",
                        g.dims()
                    )))
                }
                _ => {}
            }
            data.extend(g.data().iter().map(|&v| F::from_f64c(v as f64)));
            batch += 1;
        }
        let dims = dims.ok_or_else(|| Error::Shape("empty batch".into()))?;
        Self::from_vec(batch, 1, dims, data)
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// All channels of one batch element.
    #[inline]
    pub fn sample(&self, n: usize) -> &[F] {
        let len = self.channels * self.voxels();
        &self.data[n * len..(n + 1) * len]
    }

    #[inline]
    pub fn sample_mut(&mut self, n: usize) -> &mut [F] {
        let len = self.channels * self.voxels();
        &mut self.data[n * len..(n + 1) * len]
    }

    #[inline]
    pub fn channel(&self, n: usize, c: usize) -> &[F] {
        let v = self.voxels();
        let start = (n * self.channels + c) * v;
        &self.data[start..start + v]
    }

    #[inline]
    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [F] {
        let v = self.voxels();
        let start = (n * self.channels + c) * v;
        &mut self.data[start..start + v]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.batch == other.batch && self.channels == other.channels && self.dims == other.dims
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Selects a contiguous range of batch elements.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Self {
        let per = self.channels * self.voxels();
        Self {
            batch: len,
            channels: self.channels,
            dims: self.dims,
            data: self.data[start * per..(start + len) * per].to_vec(),
        }
    }

    /// Concatenates along the channel axis.
    pub fn cat_channels(a: &Self, b: &Self) -> Result<Self> {
        if a.batch != b.batch || a.dims != b.dims {
            return Err(Error::Shape(format!(
                "cannot concatenate [{}, _, {:?}] with [{}, _, {:?}]",
                a.batch, a.dims, b.batch, b.dims
            )));
        }
        let channels = a.channels + b.channels;
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for n in 0..a.batch {
            data.extend_from_slice(a.sample(n));
            data.extend_from_slice(b.sample(n));
        }
        Ok(Self {
            batch: a.batch,
            channels,
            dims: a.dims,
            data,
        })
    }

    /// Inverse of [`Tensor::cat_channels`]: the first `first` channels and the rest.
    pub fn split_channels(&self, first: usize) -> (Self, Self) {
        assert!(first <= self.channels);
        let v = self.voxels();
        let rest = self.channels - first;
        let mut a = Vec::with_capacity(self.batch * first * v);
        let mut b = Vec::with_capacity(self.batch * rest * v);
        for n in 0..self.batch {
            let s = self.sample(n);
            a.extend_from_slice(&s[..first * v]);
            b.extend_from_slice(&s[first * v..]);
        }
        (
            Self {
                batch: self.batch,
                channels: first,
                dims: self.dims,
                data: a,
            },
            Self {
                batch: self.batch,
                channels: rest,
                dims: self.dims,
                data: b,
            },
        )
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            batch: self.batch,
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|&v| G::from_f64c(v.to_f64c())).collect(),
        }
    }
}
