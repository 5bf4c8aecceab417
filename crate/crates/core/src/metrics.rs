//! Overlap and surface-distance metrics.
//!
//! Surface distances are pooled over both directions before reduction;
//! percentiles use linear interpolation between order statistics
//! (rank `q·(n−1)`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Mask;

fn check_dims(a: &Mask, b: &Mask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("mask dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn overlap(a: &Mask, b: &Mask) -> (usize, usize, usize) {
    let mut inter = 0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
    }
    (inter, a.count(), b.count())
}

/// `2|a∩b| / (|a|+|b|)`, 1 when both are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    check_dims(a, b)?;
    let (i, na, nb) = overlap(a, b);
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (na + nb) as f64)
}

/// `|a∩b| / |a∪b|`, 1 when both are empty.
pub fn jaccard(a: &Mask, b: &Mask) -> Result<f64> {
    check_dims(a, b)?;
    let (i, na, nb) = overlap(a, b);
    let union = na + nb - i;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(i as f64 / union as f64)
}

/// Foreground voxels with a background or out-of-bounds face neighbour.
pub fn surface_voxels(mask: &Mask) -> Vec<[usize; 3]> {
    let dims = mask.dims();
    let mut out = Vec::new();
    for (i, &v) in mask.data().iter().enumerate() {
        if !v {
            continue;
        }
        let p = mask.coords(i);
        let boundary = (0..3).any(|a| {
            if p[a] == 0 || p[a] + 1 == dims[a] {
                return true;
            }
            let mut lo = p;
            lo[a] -= 1;
            let mut hi = p;
            hi[a] += 1;
            !*mask.get(lo) || !*mask.get(hi)
        });
        if boundary {
            out.push(p);
        }
    }
    out
}

/// Exact squared Euclidean distance to the nearest site, per voxel, with
/// per-axis spacing (separable lower-envelope transform).
pub fn squared_distance_to(sites: &Mask, spacing: [f64; 3]) -> Vec<f64> {
    let dims = sites.dims();
    let mut d: Vec<f64> = sites
        .data()
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let stride = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        let w = spacing[axis] * spacing[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let mut v = vec![0usize; n];
        let mut z = vec![0.0; n + 1];
        for i in 0..dims[o1] {
            for j in 0..dims[o2] {
                let base = i * stride[o1] + j * stride[o2];
                for (k, l) in line.iter_mut().enumerate() {
                    *l = d[base + k * stride[axis]];
                }
                envelope_1d(&line, w, &mut out, &mut v, &mut z);
                for (k, &o) in out.iter().enumerate() {
                    d[base + k * stride[axis]] = o;
                }
            }
        }
    }
    d
}

/// `out[q] = min_p f[p] + w (q−p)²`.
fn envelope_1d(f: &[f64], w: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    let mut k = 0;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let para = |q: usize| f[q] + w * (q * q) as f64;
    let intersection = |p: usize, q: usize| (para(q) - para(p)) / (2.0 * w * (q as f64 - p as f64));
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let mut s = intersection(v[k], q);
        // z[0] is -inf, so popping stops at k = 0
        while s <= z[k] {
            k -= 1;
            s = intersection(v[k], q);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *o = w * dq * dq + f[v[k]];
    }
}

fn surface_mask(mask: &Mask) -> (Mask, Vec<[usize; 3]>) {
    let pts = surface_voxels(mask);
    let mut m = Mask::filled(mask.dims(), false);
    for &p in &pts {
        m.set(p, true);
    }
    (m, pts)
}

/// Pooled directed surface distances `d(a→b) ∪ d(b→a)`; `None` if either
/// surface is empty.
pub fn surface_distances(a: &Mask, b: &Mask, spacing: [f64; 3]) -> Result<Option<Vec<f64>>> {
    check_dims(a, b)?;
    let (ma, pa) = surface_mask(a);
    let (mb, pb) = surface_mask(b);
    if pa.is_empty() || pb.is_empty() {
        return Ok(None);
    }
    let to_b = squared_distance_to(&mb, spacing);
    let to_a = squared_distance_to(&ma, spacing);
    let mut out = Vec::with_capacity(pa.len() + pb.len());
    out.extend(pa.iter().map(|&p| to_b[a.index(p)].sqrt()));
    out.extend(pb.iter().map(|&p| to_a[b.index(p)].sqrt()));
    Ok(Some(out))
}

/// Linear-interpolation percentile, `q` in [0, 100].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (v[hi] - v[lo]) * frac
    }
}

/// 95th percentile of the pooled surface distances.
pub fn hd95(a: &Mask, b: &Mask, spacing: [f64; 3]) -> Result<Option<f64>> {
    Ok(surface_distances(a, b, spacing)?.map(|d| percentile(&d, 95.0)))
}

/// Mean of the pooled surface distances.
pub fn asd(a: &Mask, b: &Mask, spacing: [f64; 3]) -> Result<Option<f64>> {
    Ok(surface_distances(a, b, spacing)?.map(|d| d.iter().sum::<f64>() / d.len() as f64))
}

/// Units for surface distances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceUnit {
    #[default]
    Voxel,
    Mm,
}

impl DistanceUnit {
    pub fn spacing(self, volume_spacing: [f64; 3]) -> [f64; 3] {
        match self {
            DistanceUnit::Voxel => [1.0; 3],
            DistanceUnit::Mm => volume_spacing,
        }
    }
}

/// Per-case scores; surface metrics are `None` when a surface is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: String,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

impl CaseResult {
    pub fn compute(id: impl Into<String>, pred: &Mask, reference: &Mask, spacing: [f64; 3]) -> Result<Self> {
        let dists = surface_distances(pred, reference, spacing)?;
        Ok(Self {
            id: id.into(),
            dice: dice(pred, reference)?,
            jaccard: jaccard(pred, reference)?,
            hd95: dists.as_ref().map(|d| percentile(d, 95.0)),
            asd: dists.as_ref().map(|d| d.iter().sum::<f64>() / d.len() as f64),
        })
    }

    pub fn has_surface_metrics(&self) -> bool {
        self.hd95.is_some() && self.asd.is_some()
    }
}

/// Corpus means; surface means skip cases without surface metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dice_mean: f64,
    pub jaccard_mean: f64,
    pub hd95_mean: Option<f64>,
    pub asd_mean: Option<f64>,
    pub n: usize,
    pub skipped: usize,
}

impl Aggregate {
    pub fn from_results(results: &[CaseResult]) -> Self {
        let n = results.len();
        let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let defined: Vec<&CaseResult> = results.iter().filter(|r| r.has_surface_metrics()).collect();
        Self {
            dice_mean: mean(results.iter().map(|r| r.dice).collect()).unwrap_or(f64::NAN),
            jaccard_mean: mean(results.iter().map(|r| r.jaccard).collect()).unwrap_or(f64::NAN),
            hd95_mean: mean(defined.iter().filter_map(|r| r.hd95).collect()),
            asd_mean: mean(defined.iter().filter_map(|r| r.asd).collect()),
            n,
            skipped: n - defined.len(),
        }
    }
}

/// A prediction paired with its reference.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub id: String,
    pub prediction: Mask,
    pub reference: Mask,
    pub spacing: [f64; 3],
}

pub fn evaluate_corpus(pairs: &[EvalPair], unit: DistanceUnit) -> Result<(Vec<CaseResult>, Aggregate)> {
    let results = pairs
        .iter()
        .map(|p| CaseResult::compute(&p.id, &p.prediction, &p.reference, unit.spacing(p.spacing)))
        .collect::<Result<Vec<_>>>()?;
    let agg = Aggregate::from_results(&results);
    Ok((results, agg))
}

/// Sentinel written for undefined surface metrics.
pub const UNDEFINED: &str = "undefined";

/// One row per case: `id,dice,jaccard,hd95,asd`.
pub fn write_csv(path: &Path, results: &[CaseResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "dice", "jaccard", "hd95", "asd"])?;
    let fmt = |v: Option<f64>| v.map_or_else(|| UNDEFINED.to_string(), |x| x.to_string());
    for r in results {
        w.write_record([r.id.clone(), r.dice.to_string(), r.jaccard.to_string(), fmt(r.hd95), fmt(r.asd)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<CaseResult>> {
    let mut r = csv::Reader::from_path(path)?;
    let parse = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Data(format!("bad metric value `{s}`"))) };
    let opt = |s: &str| -> Result<Option<f64>> { if s == UNDEFINED { Ok(None) } else { parse(s).map(Some) } };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 5 {
            return Err(Error::Data(format!("metric row has {} fields", rec.len())));
        }
        out.push(CaseResult {
            id: rec[0].to_string(),
            dice: parse(&rec[1])?,
            jaccard: parse(&rec[2])?,
            hd95: opt(&rec[3])?,
            asd: opt(&rec[4])?,
        });
    }
    Ok(out)
}

pub fn write_aggregate(path: &Path, agg: &Aggregate) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(agg)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn mask(dims: [usize; 3], pts: &[[usize; 3]]) -> Mask {
        let mut m = Mask::filled(dims, false);
        for &p in pts {
            m.set(p, true);
        }
        m
    }

    #[test]
    fn dice_and_jaccard_small_counts() {
        let d = [4, 4, 4];
        let a = mask(d, &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]);
        let b = mask(d, &[[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert!((jaccard(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let empty = Mask::filled(d, false);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(jaccard(&empty, &empty).unwrap(), 1.0);
        let c = mask(d, &[[3, 3, 3]]);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        assert!(dice(&a, &Mask::filled([4, 4, 5], false)).is_err());
    }

    #[test]
    fn surface_of_cube_and_point() {
        let cube = Grid::from_fn([5, 5, 5], |p| p.iter().all(|&c| (1..=3).contains(&c)));
        let s = surface_voxels(&cube);
        assert_eq!(s.len(), 26);
        assert!(!s.contains(&[2, 2, 2]));
        assert_eq!(surface_voxels(&mask([3, 3, 3], &[[1, 1, 1]])), vec![[1, 1, 1]]);
        assert!(surface_voxels(&Mask::filled([3, 3, 3], false)).is_empty());
    }

    #[test]
    fn two_points_three_apart() {
        let a = mask([8, 8, 8], &[[1, 2, 2]]);
        let b = mask([8, 8, 8], &[[4, 2, 2]]);
        assert_eq!(hd95(&a, &b, [1.0; 3]).unwrap(), Some(3.0));
        assert_eq!(asd(&a, &b, [1.0; 3]).unwrap(), Some(3.0));
        assert_eq!(hd95(&a, &a, [1.0; 3]).unwrap(), Some(0.0));
        assert_eq!(hd95(&a, &Mask::filled([8, 8, 8], false), [1.0; 3]).unwrap(), None);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[0.0, 10.0], 95.0), 9.5);
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), 2.0);
        assert_eq!(percentile(&[7.0], 95.0), 7.0);
    }

    #[test]
    fn csv_round_trip_keeps_sentinel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rows = vec![
            CaseResult { id: "a".into(), dice: 0.5, jaccard: 1.0 / 3.0, hd95: Some(2.5), asd: Some(1.25) },
            CaseResult { id: "b".into(), dice: 0.0, jaccard: 0.0, hd95: None, asd: None },
        ];
        write_csv(&p, &rows).unwrap();
        assert_eq!(read_csv(&p).unwrap(), rows);
        let agg = Aggregate::from_results(&rows);
        assert_eq!((agg.n, agg.skipped, agg.hd95_mean), (2, 1, Some(2.5)));
        assert_eq!(agg.dice_mean, 0.25);
    }
}
