use ccnet_py::convert::{dims_from_shape, grid_from_flat, shape_from_dims, spacing_from_array_order};

#[test]
fn array_shape_maps_to_reversed_grid_dims() {
    assert_eq!(dims_from_shape(&[5, 6, 7]).unwrap(), [7, 6, 5]);
    assert_eq!(shape_from_dims([7, 6, 5]), [5, 6, 7]);
    assert!(dims_from_shape(&[2, 2]).is_err());
    assert_eq!(spacing_from_array_order([3.0, 2.0, 1.0]), [1.0, 2.0, 3.0]);
}

#[test]
fn c_order_buffer_is_x_fastest() {
    // array[z][y][x] = 100 z + 10 y + x
    let shape = [2, 3, 4];
    let flat: Vec<i32> = (0..2)
        .flat_map(|z| (0..3).flat_map(move |y| (0..4).map(move |x| 100 * z + 10 * y + x)))
        .collect();
    let g = grid_from_flat(&shape, flat).unwrap();
    assert_eq!(g.dims(), [4, 3, 2]);
    assert_eq!(*g.get([3, 1, 1]), 113);
}
