//! Main-model sliding-window prediction and binarisation.

use serde::{Deserialize, Serialize};

use crate::datapipe::PatchSpec;
use crate::error::{Error, Result};
use crate::netcore::{ModelView, ProbabilityMap, Role};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::volume::{Grid, Mask, Volume};

pub const DEFAULT_STRIDE: [usize; 3] = [18, 18, 4];

/// Maps one patch to its foreground probabilities.
pub trait PatchPredictor {
    fn predict_patch(&self, patch: &Grid<f32>) -> Result<Grid<f32>>;
}

impl<F: Real> PatchPredictor for ModelView<'_, F> {
    fn predict_patch(&self, patch: &Grid<f32>) -> Result<Grid<f32>> {
        let x: Tensor<F> = Tensor::from_grids([patch])?;
        let p = self.forward(&x)?;
        Ok(Grid::new(
            patch.dims(),
            p.foreground(0).iter().map(|v| v.to_f64c() as f32).collect(),
        )?)
    }
}

/// Window origins along one axis: every `stride` step plus a final
/// window aligned to the far edge. A stride beyond the patch extent would
/// leave gaps, so it is capped at `patch`.
pub fn window_starts(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    assert!(patch <= len && stride > 0);
    let last = len - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride.min(patch)).collect();
    if *out.last().expect("at least one start") != last {
        out.push(last);
    }
    out
}

/// All window origins, z-major.
pub fn window_origins(dims: [usize; 3], patch: [usize; 3], stride: [usize; 3]) -> Vec<[usize; 3]> {
    let xs = window_starts(dims[0], patch[0], stride[0]);
    let ys = window_starts(dims[1], patch[1], stride[1]);
    let zs = window_starts(dims[2], patch[2], stride[2]);
    let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Number of windows covering each voxel.
pub fn coverage(dims: [usize; 3], patch: [usize; 3], stride: [usize; 3]) -> Grid<u32> {
    let mut count = Grid::filled(dims, 0u32);
    for o in window_origins(dims, patch, stride) {
        for z in o[2]..o[2] + patch[2] {
            for y in o[1]..o[1] + patch[1] {
                let row = count.index([o[0], y, z]);
                count.data_mut()[row..row + patch[0]].iter_mut().for_each(|c| *c += 1);
            }
        }
    }
    count
}

fn check_stride(stride: [usize; 3]) -> Result<()> {
    if stride.contains(&0) {
        return Err(Error::Config(format!("stride {stride:?} must be positive")));
    }
    Ok(())
}

/// Mean of overlapping window predictions, visiting windows in `order`
/// (indices into [`window_origins`]); `None` visits them in natural order.
pub fn sliding_window_with_order<P: PatchPredictor + ?Sized>(
    predictor: &P,
    volume: &Volume,
    patch: &PatchSpec,
    stride: [usize; 3],
    order: Option<&[usize]>,
) -> Result<Grid<f32>> {
    check_stride(stride)?;
    let (grid, offset) = volume.grid().pad_to(patch.size, 0.0);
    let dims = grid.dims();
    let origins = window_origins(dims, patch.size, stride);
    let natural: Vec<usize> = (0..origins.len()).collect();
    let order = order.unwrap_or(&natural);
    let mut sum = Grid::filled(dims, 0.0f64);
    let mut count = Grid::filled(dims, 0u32);
    for &w in order {
        let o = origins[w];
        let probs = predictor.predict_patch(&grid.crop(o, patch.size)?)?;
        for z in 0..patch.size[2] {
            for y in 0..patch.size[1] {
                let dst = sum.index([o[0], o[1] + y, o[2] + z]);
                let src = probs.index([0, y, z]);
                for x in 0..patch.size[0] {
                    sum.data_mut()[dst + x] += probs.data()[src + x] as f64;
                    count.data_mut()[dst + x] += 1;
                }
            }
        }
    }
    let mean = Grid::new(
        dims,
        sum.data()
            .iter()
            .zip(count.data())
            .map(|(&s, &c)| (s / c as f64) as f32)
            .collect(),
    )?;
    mean.crop(offset, volume.dims())
}

/// Full-volume prediction with the main model only.
pub fn sliding_window_predict<F: Real>(
    model: &ModelView<'_, F>,
    volume: &Volume,
    patch: &PatchSpec,
    stride: [usize; 3],
) -> Result<ProbabilityMap<f32>> {
    if model.role() != Role::Main {
        return Err(Error::Usage(format!(
            "inference uses the main model only, got {}",
            model.role()
        )));
    }
    let fg = sliding_window_with_order(model, volume, patch, stride, None)?;
    ProbabilityMap::from_foreground(1, volume.dims(), fg.data())
}

/// Foreground where the foreground probability exceeds `threshold`.
pub fn binarize<F: Real>(p: &ProbabilityMap<F>, threshold: f64) -> Mask {
    let data = p.foreground(0).iter().map(|v| v.to_f64c() > threshold).collect();
    Grid::new(p.dims(), data).expect("map dims match data")
}

/// JSON sidecar written next to each predicted mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionInfo {
    pub case_id: String,
    pub checkpoint: String,
    pub threshold: f64,
    pub stride: [usize; 3],
    pub patch: [usize; 3],
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Const(f32);

    impl PatchPredictor for Const {
        fn predict_patch(&self, patch: &Grid<f32>) -> Result<Grid<f32>> {
            Ok(Grid::filled(patch.dims(), self.0))
        }
    }

    /// Probability depends on the window position, so overlaps differ.
    struct Positional;

    impl PatchPredictor for Positional {
        fn predict_patch(&self, patch: &Grid<f32>) -> Result<Grid<f32>> {
            let s = patch.data().iter().map(|&v| v as f64).sum::<f64>();
            let c = (s.sin() * 0.5 + 0.5) as f32;
            Ok(patch.map(|&v| (c + v * 1e-3).fract()))
        }
    }

    #[test]
    fn window_starts_include_edge() {
        assert_eq!(window_starts(40, 32, 18), vec![0, 8]);
        assert_eq!(window_starts(32, 32, 18), vec![0]);
        assert_eq!(window_starts(68, 32, 18), vec![0, 18, 36]);
        assert_eq!(window_starts(69, 32, 18), vec![0, 18, 36, 37]);
        assert_eq!(window_starts(3, 1, 2), vec![0, 1, 2]);
    }

    #[test]
    fn constant_predictor_reconstructs_constant() {
        let v = Volume::zeros("v", [40, 37, 20]);
        let patch = PatchSpec::new([32, 32, 16]).unwrap();
        let out = sliding_window_with_order(&Const(0.3), &v, &patch, [18, 18, 4], None).unwrap();
        assert_eq!(out.dims(), [40, 37, 20]);
        assert!(out.data().iter().all(|&x| (x - 0.3).abs() <= 1e-6));
    }

    #[test]
    fn visit_order_does_not_matter() {
        let v = Volume::new("v", Grid::from_fn([36, 34, 20], |p| ((p[0] * 7 + p[1] * 3 + p[2]) % 11) as f32), [1.0; 3]).unwrap();
        let patch = PatchSpec::new([32, 32, 16]).unwrap();
        let n = window_origins(v.dims(), patch.size, [2, 2, 2]).len();
        let rev: Vec<usize> = (0..n).rev().collect();
        let a = sliding_window_with_order(&Positional, &v, &patch, [2, 2, 2], None).unwrap();
        let b = sliding_window_with_order(&Positional, &v, &patch, [2, 2, 2], Some(&rev)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn small_volume_is_padded_and_cropped_back() {
        let v = Volume::zeros("v", [20, 40, 10]);
        let patch = PatchSpec::new([32, 32, 16]).unwrap();
        let out = sliding_window_with_order(&Const(0.9), &v, &patch, DEFAULT_STRIDE, None).unwrap();
        assert_eq!(out.dims(), [20, 40, 10]);
    }

    #[test]
    fn binarize_is_strict() {
        let p = ProbabilityMap::from_foreground(1, [2, 1, 1], &[0.5f64, 0.51]).unwrap();
        assert_eq!(binarize(&p, 0.5).data(), &[false, true]);
        let z = ProbabilityMap::from_foreground(1, [3, 1, 1], &[0.0f64, 1e-9, 1.0]).unwrap();
        assert_eq!(binarize(&z, 0.0).data(), &[false, true, true]);
        let ones = ProbabilityMap::from_foreground(1, [3, 1, 1], &[1.0f64; 3]).unwrap();
        assert!(binarize(&ones, 0.5).data().iter().all(|&b| b));
    }
}
