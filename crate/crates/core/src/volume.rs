//! Scalar grids, image volumes and binary masks.
//!
//! All grids are stored with the first axis varying fastest, matching the
//! NRRD on-disk order: `index = x + nx * (y + ny * z)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense 3D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

/// Binary segmentation mask.
pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "grid {:?} needs {} values, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut([usize; 3]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f([x, y, z]));
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, p: [usize; 3]) -> usize {
        p[0] + self.dims[0] * (p[1] + self.dims[1] * p[2])
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let rest = index / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn get(&self, p: [usize; 3]) -> &T {
        &self.data[self.index(p)]
    }

    #[inline]
    pub fn set(&mut self, p: [usize; 3], v: T) {
        let i = self.index(p);
        self.data[i] = v;
    }

    /// Sub-block starting at `origin` with extent `size`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if origin[a] + size[a] > self.dims[a] {
                return Err(Error::Shape(format!(
                    "crop {:?}+{:?} exceeds grid {:?}",
                    origin, size, self.dims
                )));
            }
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for z in 0..size[2] {
            for y in 0..size[1] {
                let start = self.index([origin[0], origin[1] + y, origin[2] + z]);
                data.extend_from_slice(&self.data[start..start + size[0]]);
            }
        }
        Ok(Self { dims: size, data })
    }

    /// Writes `block` into this grid at `origin`.
    pub fn paste(&mut self, origin: [usize; 3], block: &Self) -> Result<()> {
        let size = block.dims;
        for a in 0..3 {
            if origin[a] + size[a] > self.dims[a] {
                return Err(Error::Shape(format!(
                    "paste {:?}+{:?} exceeds grid {:?}",
                    origin, size, self.dims
                )));
            }
        }
        for z in 0..size[2] {
            for y in 0..size[1] {
                let dst = self.index([origin[0], origin[1] + y, origin[2] + z]);
                let src = block.index([0, y, z]);
                self.data[dst..dst + size[0]].clone_from_slice(&block.data[src..src + size[0]]);
            }
        }
        Ok(())
    }

    /// Pads symmetrically with `fill` so every axis is at least `min_dims`.
    /// Returns the padded grid and the offset of the original inside it.
    pub fn pad_to(&self, min_dims: [usize; 3], fill: T) -> (Self, [usize; 3]) {
        let mut dims = self.dims;
        let mut offset = [0; 3];
        for a in 0..3 {
            if dims[a] < min_dims[a] {
                offset[a] = (min_dims[a] - dims[a]) / 2;
                dims[a] = min_dims[a];
            }
        }
        if dims == self.dims {
            return (self.clone(), offset);
        }
        let mut out = Self::filled(dims, fill);
        out.paste(offset, self).expect("padded grid contains original");
        (out, offset)
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            dims: self.dims,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Inclusive bounding box `(min, max)` of the set voxels, if any.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, &v) in self.data.iter().enumerate() {
            if v {
                any = true;
                let p = self.coords(i);
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
        }
        any.then_some((lo, hi))
    }

    /// Converts label values to a mask, rejecting anything outside {0, 1}.
    pub fn from_labels(dims: [usize; 3], values: &[f64]) -> Result<Self> {
        let mut data = Vec::with_capacity(values.len());
        for (i, &v) in values.iter().enumerate() {
            if v == 0.0 {
                data.push(false);
            } else if v == 1.0 {
                data.push(true);
            } else {
                return Err(Error::Data(format!(
                    "label value {v} at voxel {i} is outside {{0, 1}}"
                )));
            }
        }
        Grid::new(dims, data)
    }
}

/// An image volume with physical voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub id: String,
    spacing: [f64; 3],
    grid: Grid<f32>,
}

impl Volume {
    pub fn new(id: impl Into<String>, grid: Grid<f32>, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Data(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Self {
            id: id.into(),
            spacing,
            grid,
        })
    }

    pub fn from_data(
        id: impl Into<String>,
        dims: [usize; 3],
        data: Vec<f32>,
        spacing: [f64; 3],
    ) -> Result<Self> {
        Self::new(id, Grid::new(dims, data)?, spacing)
    }

    pub fn zeros(id: impl Into<String>, dims: [usize; 3]) -> Self {
        Self {
            id: id.into(),
            spacing: [1.0; 3],
            grid: Grid::filled(dims, 0.0),
        }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims()
    }

    #[inline]
    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    #[inline]
    pub fn grid(&self) -> &Grid<f32> {
        &self.grid
    }

    #[inline]
    pub fn grid_mut(&mut self) -> &mut Grid<f32> {
        &mut self.grid
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        self.grid.data()
    }

    pub fn with_grid(&self, grid: Grid<f32>) -> Self {
        Self {
            id: self.id.clone(),
            spacing: self.spacing,
            grid,
        }
    }

    /// Checks the network-input constraint that every axis is at least 16.
    pub fn check_network_input(&self) -> Result<()> {
        if self.dims().iter().any(|&d| d < 16) {
            return Err(Error::Shape(format!(
                "network input must be at least 16 voxels per axis, got {:?}",
                self.dims()
            )));
        }
        Ok(())
    }
}

/// Inclusive-exclusive axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip_is_x_fastest() {
        let g = Grid::filled([3, 4, 5], 0u8);
        assert_eq!(g.index([1, 0, 0]), 1);
        assert_eq!(g.index([0, 1, 0]), 3);
        assert_eq!(g.index([0, 0, 1]), 12);
        for i in 0..g.len() {
            assert_eq!(g.index(g.coords(i)), i);
        }
    }

    #[test]
    fn crop_then_paste_restores() {
        let g = Grid::from_fn([5, 6, 7], |p| (p[0] + 10 * p[1] + 100 * p[2]) as i32);
        let block = g.crop([1, 2, 3], [3, 2, 4]).unwrap();
        assert_eq!(*block.get([0, 0, 0]), 1 + 20 + 300);
        let mut h = Grid::filled([5, 6, 7], 0);
        h.paste([1, 2, 3], &block).unwrap();
        assert_eq!(*h.get([3, 3, 6]), *g.get([3, 3, 6]));
        assert!(g.crop([3, 0, 0], [3, 1, 1]).is_err());
    }

    #[test]
    fn pad_centres_original() {
        let g = Grid::filled([2, 8, 3], 1.0f32);
        let (p, off) = g.pad_to([6, 4, 3], 0.0);
        assert_eq!(p.dims(), [6, 8, 3]);
        assert_eq!(off, [2, 0, 0]);
        assert_eq!(p.data().iter().sum::<f32>(), 48.0);
    }

    #[test]
    fn labels_outside_binary_rejected() {
        assert!(Mask::from_labels([2, 1, 1], &[0.0, 1.0]).is_ok());
        let err = Mask::from_labels([2, 1, 1], &[0.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn spacing_must_be_positive() {
        assert!(Volume::from_data("a", [1, 1, 1], vec![0.0], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn bounding_box_of_mask() {
        let mut m = Mask::filled([5, 5, 5], false);
        assert!(m.bounding_box().is_none());
        m.set([1, 2, 3], true);
        m.set([3, 0, 4], true);
        assert_eq!(m.bounding_box(), Some(([1, 0, 3], [3, 2, 4])));
    }
}
