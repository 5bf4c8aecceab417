use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::nrrd;
use crate::error::{Error, Result};
use crate::volume::{BoundingBox, Mask, Volume};

/// One image with an optional ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub volume: Volume,
    pub label: Option<Mask>,
}

impl Case {
    pub fn new(id: impl Into<String>, volume: Volume, label: Option<Mask>) -> Result<Self> {
        let id = id.into();
        if let Some(l) = &label {
            if l.dims() != volume.dims() {
                return Err(Error::Shape(format!(
                    "case {id}: label dims {:?} differ from image dims {:?}",
                    l.dims(),
                    volume.dims()
                )));
            }
        }
        Ok(Self { id, volume, label })
    }

    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }

    /// Same case with the label withheld.
    pub fn unlabeled(&self) -> Self {
        Self {
            id: self.id.clone(),
            volume: self.volume.clone(),
            label: None,
        }
    }
}

/// Candidate label files that pair with an image file.
fn label_candidates(image: &Path) -> Vec<PathBuf> {
    let dir = image.parent().unwrap_or(Path::new("."));
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    let ext = image.extension().and_then(|s| s.to_str()).unwrap_or("nrrd");
    let mut out = vec![dir.join(format!("{stem}_label.{ext}"))];
    if stem == "lgemri" {
        out.push(dir.join(format!("laendo.{ext}")));
    }
    out
}

/// Loads an image and, when a paired label file exists next to it, its mask.
///
/// Pairing: `<stem>_label.nrrd`, or `laendo.nrrd` beside `lgemri.nrrd`.
pub fn load_nrrd(path: &Path) -> Result<Case> {
    let label = label_candidates(path).into_iter().find(|p| p.exists());
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| *s != "lgemri")
        .map(str::to_string)
        .or_else(|| {
            path.parent()
                .and_then(|p| p.file_name())
                .and_then(|s| s.to_str())
                .map(str::to_string)
        })
        .unwrap_or_else(|| "case".into());
    load_case(&id, path, label.as_deref())
}

/// Loads an image and an optional explicit label file.
pub fn load_case(id: &str, image: &Path, label: Option<&Path>) -> Result<Case> {
    let volume = nrrd::read_volume(image, id)?;
    let label = match label {
        Some(p) => {
            let (mask, _) = nrrd::read_mask(p)?;
            if mask.dims() != volume.dims() {
                return Err(Error::Shape(format!(
                    "label {} has dims {:?}, image has {:?}",
                    p.display(),
                    mask.dims(),
                    volume.dims()
                )));
            }
            Some(mask)
        }
        None => None,
    };
    Case::new(id, volume, label)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Voxels added around the foreground bounding box on every side.
    pub margin: usize,
    pub variance_floor: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            margin: 25,
            variance_floor: 1e-6,
        }
    }
}

/// Otsu threshold over a 256-bin intensity histogram.
pub fn otsu_threshold(values: &[f32]) -> f32 {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return lo;
    }
    const BINS: usize = 256;
    let width = (hi - lo) as f64 / BINS as f64;
    let mut hist = [0u64; BINS];
    for &v in values {
        let b = (((v - lo) as f64 / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best.1 {
            best = (i, between);
        }
    }
    lo + ((best.0 + 1) as f64 * width) as f32
}

/// Expands an inclusive `(min, max)` box by `margin`, clamped to `dims`.
pub fn expand_box(min: [usize; 3], max: [usize; 3], margin: usize, dims: [usize; 3]) -> BoundingBox {
    let mut origin = [0; 3];
    let mut size = [0; 3];
    for a in 0..3 {
        origin[a] = min[a].saturating_sub(margin);
        let end = (max[a] + margin + 1).min(dims[a]);
        size[a] = end - origin[a];
    }
    BoundingBox { origin, size }
}

/// Crop box used by [`preprocess`]: label bounding box for labeled cases,
/// Otsu foreground bounding box otherwise.
pub fn crop_box(case: &Case, cfg: &PreprocessConfig) -> Result<BoundingBox> {
    let dims = case.volume.dims();
    let bb = match &case.label {
        Some(label) => label
            .bounding_box()
            .ok_or_else(|| Error::Data(format!("case {}: labeled case has an empty mask", case.id)))?,
        None => {
            let t = otsu_threshold(case.volume.data());
            let fg: Mask = case.volume.grid().map(|&v| v > t);
            match fg.bounding_box() {
                Some(bb) => bb,
                None => return Ok(BoundingBox { origin: [0; 3], size: dims }),
            }
        }
    };
    Ok(expand_box(bb.0, bb.1, cfg.margin, dims))
}

/// Zero-mean, unit-variance intensities; constant volumes map to zero.
pub fn normalize(volume: &Volume, variance_floor: f64) -> Volume {
    let (mean, std) = intensity_stats(volume.data(), variance_floor);
    let grid = volume.grid().map(|&v| ((v as f64 - mean) / std) as f32);
    volume.with_grid(grid)
}

/// Mean and floored standard deviation.
pub fn intensity_stats(data: &[f32], variance_floor: f64) -> (f64, f64) {
    let n = data.len().max(1) as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.max(variance_floor).sqrt())
}

/// Crops to the (label or intensity) foreground box plus margin, then normalises.
pub fn preprocess(case: &Case, cfg: &PreprocessConfig) -> Result<Case> {
    preprocess_with_box(case, cfg).map(|(c, _)| c)
}

pub fn preprocess_with_box(case: &Case, cfg: &PreprocessConfig) -> Result<(Case, BoundingBox)> {
    let bb = crop_box(case, cfg)?;
    let cropped = case.volume.with_grid(case.volume.grid().crop(bb.origin, bb.size)?);
    let volume = normalize(&cropped, cfg.variance_floor);
    let label = case
        .label
        .as_ref()
        .map(|l| l.crop(bb.origin, bb.size))
        .transpose()?;
    Ok((Case::new(case.id.clone(), volume, label)?, bb))
}
