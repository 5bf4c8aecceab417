//! Procedural phantoms: an ellipsoidal body with tubular branches, blurred
//! and corrupted by Gaussian noise, with the exact binary mask as label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::case::Case;
use crate::error::{Error, Result};
use crate::volume::{Grid, Mask, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_cases: usize,
    pub dims: [usize; 3],
    pub seed: u64,
    pub spacing: [f64; 3],
    /// Standard deviation of the additive noise (foreground contrast is 1).
    pub noise_std: f64,
    /// Gaussian blur sigma in voxels applied to the shape before noise.
    pub blur_sigma: f64,
    /// Accepted foreground fraction; shapes outside it are redrawn.
    pub foreground_band: [f64; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cases: 1,
            dims: [64, 64, 64],
            seed: 1337,
            spacing: [0.625; 3],
            noise_std: 0.25,
            blur_sigma: 1.0,
            foreground_band: [0.02, 0.15],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::Config(format!("synthetic dims {:?} must be at least 16", self.dims)));
        }
        let [lo, hi] = self.foreground_band;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!("invalid foreground band {:?}", self.foreground_band)));
        }
        if self.noise_std < 0.0 || self.blur_sigma < 0.0 {
            return Err(Error::Config("noise and blur must be nonnegative".into()));
        }
        Ok(())
    }
}

const MAX_DRAWS: usize = 64;

/// Line segment from `a` to `b` swept by a sphere of `radius`.
#[derive(Clone, Copy, Debug)]
struct Tube {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
}

impl Tube {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d: [f64; 3] = std::array::from_fn(|i| self.b[i] - self.a[i]);
        let w: [f64; 3] = std::array::from_fn(|i| p[i] - self.a[i]);
        let dd: f64 = d.iter().map(|v| v * v).sum();
        let t = if dd > 0.0 {
            (w.iter().zip(&d).map(|(x, y)| x * y).sum::<f64>() / dd).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let dist2: f64 = (0..3).map(|i| (w[i] - t * d[i]).powi(2)).sum();
        dist2 <= self.radius * self.radius
    }
}

fn draw_shape(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Mask {
    let ext: [f64; 3] = dims.map(|d| d as f64);
    let center: [f64; 3] = std::array::from_fn(|i| ext[i] * rng.random_range(0.42..0.58));
    let radii: [f64; 3] = std::array::from_fn(|i| ext[i] * rng.random_range(0.14..0.24));
    let n_tubes = rng.random_range(2..=4);
    let tubes: Vec<Tube> = (0..n_tubes)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let z = rng.random_range(-0.6f64..0.6);
            let r = (1.0 - z * z).sqrt();
            let dir = [r * theta.cos(), r * theta.sin(), z];
            let reach = rng.random_range(1.3..1.8);
            let b: [f64; 3] = std::array::from_fn(|i| {
                (center[i] + dir[i] * radii[i] * reach).clamp(1.0, ext[i] - 2.0)
            });
            let radius = rng.random_range(1.5..2.5) * (ext.iter().cloned().fold(f64::MAX, f64::min) / 64.0).max(0.5);
            Tube { a: center, b, radius }
        })
        .collect();
    Grid::from_fn(dims, |p| {
        let q = p.map(|v| v as f64);
        let e: f64 = (0..3).map(|i| ((q[i] - center[i]) / radii[i]).powi(2)).sum();
        e <= 1.0 || tubes.iter().any(|t| t.contains(q))
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(g: &Grid<f32>, sigma: f64) -> Grid<f32> {
    if sigma <= 0.0 {
        return g.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let dims = g.dims();
    let mut cur = g.clone();
    for axis in 0..3 {
        let src = cur;
        cur = Grid::from_fn(dims, |p| {
            let mut acc = 0.0;
            for (j, &w) in k.iter().enumerate() {
                let mut q = p;
                let c = p[axis] as isize + j as isize - r;
                q[axis] = c.clamp(0, dims[axis] as isize - 1) as usize;
                acc += w * *src.get(q) as f64;
            }
            acc as f32
        });
    }
    cur
}

/// Generates case `index` of the corpus; independent of the corpus size.
pub fn synth_case(cfg: &SynthConfig, index: usize) -> Result<Case> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let total = cfg.dims.iter().product::<usize>() as f64;
    let [lo, hi] = cfg.foreground_band;
    let mut mask = None;
    for _ in 0..MAX_DRAWS {
        let m = draw_shape(cfg.dims, &mut rng);
        let frac = m.count() as f64 / total;
        if frac >= lo && frac <= hi {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or_else(|| {
        Error::Config(format!(
            "could not draw a phantom with foreground fraction in {:?} for dims {:?}",
            cfg.foreground_band, cfg.dims
        ))
    })?;
    let shape = gaussian_blur(&mask.map(|&b| if b { 1.0 } else { 0.0 }), cfg.blur_sigma);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut image = shape;
    for v in image.data_mut() {
        *v += noise.sample(&mut rng) as f32;
    }
    let id = format!("case_{index:03}");
    let volume = Volume::new(id.clone(), image, cfg.spacing)?;
    Case::new(id, volume, Some(mask))
}

/// `cfg.n_cases` labeled phantoms, bit-identical for equal configs.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Case>> {
    (0..cfg.n_cases).map(|i| synth_case(cfg, i)).collect()
}

/// Whether the foreground is a single 6-connected component.
pub fn is_connected(mask: &Mask) -> bool {
    let Some(start) = mask.data().iter().position(|&b| b) else {
        return false;
    };
    let dims = mask.dims();
    let mut seen = vec![false; mask.len()];
    let mut stack = vec![start];
    seen[start] = true;
    let mut reached = 0;
    while let Some(i) = stack.pop() {
        reached += 1;
        let p = mask.coords(i);
        for axis in 0..3 {
            for delta in [-1isize, 1] {
                let c = p[axis] as isize + delta;
                if c < 0 || c >= dims[axis] as isize {
                    continue;
                }
                let mut q = p;
                q[axis] = c as usize;
                let j = mask.index(q);
                if *mask.get(q) && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    reached == mask.count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_case_connected_and_within_band() {
        let cfg = SynthConfig::default();
        let cases = synth_generate(&cfg).unwrap();
        assert_eq!(cases.len(), 1);
        let m = cases[0].label.as_ref().unwrap();
        assert!(is_connected(m));
        let frac = m.count() as f64 / m.len() as f64;
        assert!((0.02..=0.15).contains(&frac), "{frac}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig {
            n_cases: 2,
            dims: [32, 32, 32],
            ..Default::default()
        };
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].label, a[1].label);
    }

    #[test]
    fn blur_preserves_constants() {
        let g = Grid::filled([5, 6, 7], 2.5f32);
        let b = gaussian_blur(&g, 1.3);
        assert!(b.data().iter().all(|v| (v - 2.5).abs() < 1e-5));
    }

    #[test]
    fn connectivity_detects_two_blobs() {
        let mut m = Mask::filled([5, 5, 5], false);
        m.set([0, 0, 0], true);
        m.set([0, 0, 1], true);
        assert!(is_connected(&m));
        m.set([4, 4, 4], true);
        assert!(!is_connected(&m));
    }
}
