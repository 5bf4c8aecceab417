//! Layout conversion between numpy arrays and [`Grid`]s.
//!
//! Arrays are C-ordered with shape `(z, y, x)`; grids are x-fastest with
//! dims `[x, y, z]`, so the flat buffers coincide.

use ccnet::{Error, Grid, Result};

/// Grid dims for an array of shape `(z, y, x)`.
pub fn dims_from_shape(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [z, y, x] => Ok([*x, *y, *z]),
        _ => Err(Error::Shape(format!("expected a 3D array, got shape {shape:?}"))),
    }
}

/// Array shape `(z, y, x)` for grid dims.
pub fn shape_from_dims(dims: [usize; 3]) -> [usize; 3] {
    [dims[2], dims[1], dims[0]]
}

/// Spacing given in array-axis order `(z, y, x)` to grid order.
pub fn spacing_from_array_order(spacing: [f64; 3]) -> [f64; 3] {
    [spacing[2], spacing[1], spacing[0]]
}

pub fn grid_from_flat<T: Clone>(shape: &[usize], data: Vec<T>) -> Result<Grid<T>> {
    Grid::new(dims_from_shape(shape)?, data)
}
