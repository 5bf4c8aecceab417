use rand::Rng;
use serde::{Deserialize, Serialize};

use super::case::Case;
use crate::error::{Error, Result};
use crate::netcore::check_patch_dims;
use crate::volume::{Grid, Mask};

/// Training patch extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatchSpec {
    pub size: [usize; 3],
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { size: [112, 112, 80] }
    }
}

impl PatchSpec {
    pub fn new(size: [usize; 3]) -> Result<Self> {
        check_patch_dims(size)?;
        Ok(Self { size })
    }
}

/// Crops a uniformly placed patch; the label (if any) is cropped identically.
pub fn sample_patch<R: Rng + ?Sized>(
    case: &Case,
    patch: &PatchSpec,
    rng: &mut R,
) -> Result<(Grid<f32>, Option<Mask>)> {
    let dims = case.volume.dims();
    if (0..3).any(|a| dims[a] < patch.size[a]) {
        return Err(Error::Shape(format!(
            "case {}: volume {:?} is smaller than patch {:?}; pad it to at least the patch size first",
            case.id, dims, patch.size
        )));
    }
    let corner: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=dims[a] - patch.size[a]));
    let image = case.volume.grid().crop(corner, patch.size)?;
    let label = case
        .label
        .as_ref()
        .map(|l| l.crop(corner, patch.size))
        .transpose()?;
    Ok((image, label))
}

/// In-plane (x–y) quarter turns followed by per-axis flips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub quarter_turns: u8,
    pub flips: [bool; 3],
}

impl Augmentation {
    /// Random augmentation; odd quarter turns only when x and y extents agree.
    pub fn random<R: Rng + ?Sized>(dims: [usize; 3], rng: &mut R) -> Self {
        let mut quarter_turns = rng.random_range(0..4u8);
        if dims[0] != dims[1] {
            quarter_turns &= 2;
        }
        let flips = std::array::from_fn(|_| rng.random_bool(0.5));
        Self { quarter_turns, flips }
    }

    pub fn apply<T: Clone>(&self, g: &Grid<T>) -> Grid<T> {
        let mut out = rotate(g, self.quarter_turns);
        for (axis, &f) in self.flips.iter().enumerate() {
            if f {
                out = flip(&out, axis);
            }
        }
        out
    }

    /// Undoes [`Augmentation::apply`].
    pub fn invert<T: Clone>(&self, g: &Grid<T>) -> Grid<T> {
        let mut out = g.clone();
        for (axis, &f) in self.flips.iter().enumerate() {
            if f {
                out = flip(&out, axis);
            }
        }
        rotate(&out, (4 - self.quarter_turns % 4) % 4)
    }
}

/// Mirrors along `axis`.
pub fn flip<T: Clone>(g: &Grid<T>, axis: usize) -> Grid<T> {
    let d = g.dims();
    Grid::from_fn(d, |mut p| {
        p[axis] = d[axis] - 1 - p[axis];
        g.get(p).clone()
    })
}

/// Rotates by `k` quarter turns in the x–y plane.
pub fn rotate<T: Clone>(g: &Grid<T>, k: u8) -> Grid<T> {
    let mut out = g.clone();
    for _ in 0..k % 4 {
        let [nx, ny, nz] = out.dims();
        let src = out;
        // new(x', y') = old(y', ny-1-x'), with new dims [ny, nx]
        out = Grid::from_fn([ny, nx, nz], |p| src.get([p[1], ny - 1 - p[0], p[2]]).clone());
    }
    out
}

/// Applies one random augmentation to an image patch and its label.
pub fn augment<R: Rng + ?Sized>(
    image: &Grid<f32>,
    label: Option<&Mask>,
    rng: &mut R,
) -> (Grid<f32>, Option<Mask>) {
    let aug = Augmentation::random(image.dims(), rng);
    (aug.apply(image), label.map(|l| aug.apply(l)))
}
