//! V-Net backbone and its two complementary skip-connection variants.
//!
//! Decoder layers are numbered 1 (deepest, lowest resolution) to 4
//! (shallowest). Decoder layer `j` can concatenate encoder output
//! `a_{5-j}`; whether it does is controlled by [`SkipConfig`]. The main
//! model uses every skip, the first auxiliary model drops layers 2 and 4,
//! and the second auxiliary model drops layers 1 and 3.

mod blocks;
mod model;

pub use model::{build_model, CcNet, Decoder, Encoder, Model, ModelView};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::NormKind;
use crate::real::Real;
use crate::tensor::Tensor;

/// Number of resolution levels (four downsamplings).
pub const NUM_LEVELS: usize = 5;
/// Every patch axis must be a multiple of this.
pub const PATCH_MULTIPLE: usize = 1 << (NUM_LEVELS - 1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Main,
    Aux1,
    Aux2,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Main, Role::Aux1, Role::Aux2];

    pub fn index(self) -> usize {
        match self {
            Role::Main => 0,
            Role::Aux1 => 1,
            Role::Aux2 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Main => "main",
            Role::Aux1 => "aux1",
            Role::Aux2 => "aux2",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main" => Ok(Role::Main),
            "aux1" => Ok(Role::Aux1),
            "aux2" => Ok(Role::Aux2),
            other => Err(Error::Config(format!("unknown model role '{other}'"))),
        }
    }
}

/// Which decoder layers (1 = deepest) concatenate their encoder skip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipConfig {
    pub use_skip: [bool; 4],
}

impl SkipConfig {
    pub const MAIN: SkipConfig = SkipConfig { use_skip: [true; 4] };
    /// No skips at decoder layers 2 and 4.
    pub const AUX1: SkipConfig = SkipConfig {
        use_skip: [true, false, true, false],
    };
    /// No skips at decoder layers 1 and 3.
    pub const AUX2: SkipConfig = SkipConfig {
        use_skip: [false, true, false, true],
    };

    pub fn for_role(role: Role) -> Self {
        match role {
            Role::Main => Self::MAIN,
            Role::Aux1 => Self::AUX1,
            Role::Aux2 => Self::AUX2,
        }
    }

    /// Whether decoder layer `layer` (1-based) uses its skip.
    pub fn uses(&self, layer: usize) -> bool {
        self.use_skip[layer - 1]
    }

    /// Encoder level feeding decoder layer `layer` (1-based).
    pub fn source_level(layer: usize) -> usize {
        NUM_LEVELS - layer
    }

    /// Encoder levels whose features the decoder reads (always includes the bottleneck).
    pub fn consumed_levels(&self) -> Vec<usize> {
        let mut levels: Vec<usize> = (1..=4)
            .filter(|&j| self.uses(j))
            .map(Self::source_level)
            .collect();
        levels.push(NUM_LEVELS);
        levels.sort_unstable();
        levels
    }

    /// Layers with skips enabled.
    pub fn skip_layers(&self) -> Vec<usize> {
        (1..=4).filter(|&j| self.uses(j)).collect()
    }

    /// True when the two configs' skip sets partition `{1, 2, 3, 4}`.
    pub fn is_complementary(&self, other: &SkipConfig) -> bool {
        self.use_skip
            .iter()
            .zip(&other.use_skip)
            .all(|(&a, &b)| a ^ b)
    }
}

/// Architecture knobs shared by the three models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub base_channels: usize,
    pub norm: NormKind,
    /// One encoder feeds all three decoders.
    pub shared_encoder: bool,
    /// Auxiliary models start from the main model's seed instead of their own.
    pub identical_init: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            norm: NormKind::Batch,
            shared_encoder: false,
            identical_init: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub role: Role,
    pub skip_config: SkipConfig,
    pub base_channels: usize,
    pub num_levels: usize,
    pub out_classes: usize,
    pub shared_encoder: bool,
    pub norm: NormKind,
}

impl ModelSpec {
    pub fn new(role: Role, arch: &ArchConfig) -> Self {
        Self {
            role,
            skip_config: SkipConfig::for_role(role),
            base_channels: arch.base_channels,
            num_levels: NUM_LEVELS,
            out_classes: 2,
            shared_encoder: arch.shared_encoder,
            norm: arch.norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_levels != NUM_LEVELS {
            return Err(Error::Config(format!(
                "num_levels must be {NUM_LEVELS}, got {}",
                self.num_levels
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.out_classes != 2 {
            return Err(Error::Config(format!(
                "only 2-class segmentation is supported, got {}",
                self.out_classes
            )));
        }
        Ok(())
    }

    /// Channel count of encoder level `level` (1-based).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }
}

/// Checks that patch dimensions can pass through four halvings.
pub fn check_patch_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0 || d % PATCH_MULTIPLE != 0) {
        return Err(Error::Shape(format!(
            "patch dims {dims:?} must be positive multiples of {PATCH_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Encoder outputs `a_1 .. a_5`; `a_j` has spatial dims `input / 2^(j-1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderFeatures<F> {
    levels: Vec<Tensor<F>>,
}

impl<F: Real> EncoderFeatures<F> {
    pub fn new(levels: Vec<Tensor<F>>) -> Result<Self> {
        if levels.len() != NUM_LEVELS {
            return Err(Error::Shape(format!(
                "expected {NUM_LEVELS} feature levels, got {}",
                levels.len()
            )));
        }
        Ok(Self { levels })
    }

    /// Feature grid `a_level` (1-based).
    pub fn level(&self, level: usize) -> &Tensor<F> {
        &self.levels[level - 1]
    }

    pub fn level_mut(&mut self, level: usize) -> &mut Tensor<F> {
        &mut self.levels[level - 1]
    }

    pub fn levels(&self) -> &[Tensor<F>] {
        &self.levels
    }
}

/// Per-voxel class distribution, layout `[batch, class, voxel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap<F> {
    probs: Tensor<F>,
}

impl<F: Real> ProbabilityMap<F> {
    pub fn from_tensor(probs: Tensor<F>) -> Result<Self> {
        if probs.channels() < 2 {
            return Err(Error::Shape("probability map needs at least 2 classes".into()));
        }
        Ok(Self { probs })
    }

    /// Builds a two-class map from foreground probabilities.
    pub fn from_foreground(batch: usize, dims: [usize; 3], fg: &[F]) -> Result<Self> {
        let v: usize = dims.iter().product();
        if fg.len() != batch * v {
            return Err(Error::Shape(format!(
                "foreground needs {} values, got {}",
                batch * v,
                fg.len()
            )));
        }
        let mut t = Tensor::zeros(batch, 2, dims);
        for n in 0..batch {
            let src = &fg[n * v..(n + 1) * v];
            t.channel_mut(n, 1).copy_from_slice(src);
            for (b, &f) in t.channel_mut(n, 0).iter_mut().zip(src) {
                *b = F::one() - f;
            }
        }
        Ok(Self { probs: t })
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.probs
    }

    pub fn into_tensor(self) -> Tensor<F> {
        self.probs
    }

    pub fn batch(&self) -> usize {
        self.probs.batch()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.probs.dims()
    }

    pub fn classes(&self) -> usize {
        self.probs.channels()
    }

    pub fn foreground(&self, n: usize) -> &[F] {
        self.probs.channel(n, 1)
    }

    /// Foreground channel of every batch element, concatenated.
    pub fn foreground_all(&self) -> Vec<F> {
        (0..self.batch()).flat_map(|n| self.foreground(n).iter().copied()).collect()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.probs.same_shape(&other.probs)
    }

    /// Largest deviation of any voxel's class sum from one.
    pub fn max_normalization_error(&self) -> f64 {
        let v = self.probs.voxels();
        let mut worst = 0.0f64;
        for n in 0..self.batch() {
            for i in 0..v {
                let s: f64 = (0..self.classes()).map(|c| self.probs.channel(n, c)[i].to_f64c()).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.probs.data().iter().all(|&p| p >= F::zero() && p <= F::one())
            && self.max_normalization_error() <= tol
    }

    pub fn cast<G: Real>(&self) -> ProbabilityMap<G> {
        ProbabilityMap {
            probs: self.probs.cast(),
        }
    }
}

/// Channel softmax of logits `[batch, class, voxel]`.
pub(crate) fn softmax<F: Real>(logits: &Tensor<F>) -> Tensor<F> {
    let mut out = logits.clone();
    let c = logits.channels();
    let v = logits.voxels();
    for n in 0..logits.batch() {
        let s = out.sample_mut(n);
        for i in 0..v {
            let mut m = F::neg_infinity();
            for k in 0..c {
                m = m.max(s[k * v + i]);
            }
            let mut sum = F::zero();
            for k in 0..c {
                let e = (s[k * v + i] - m).exp();
                s[k * v + i] = e;
                sum += e;
            }
            for k in 0..c {
                s[k * v + i] /= sum;
            }
        }
    }
    out
}

/// Gradient of the logits given probabilities and the gradient w.r.t. them.
pub(crate) fn softmax_backward<F: Real>(probs: &Tensor<F>, dprobs: &Tensor<F>) -> Tensor<F> {
    let mut out = dprobs.clone();
    let c = probs.channels();
    let v = probs.voxels();
    for n in 0..probs.batch() {
        let p = probs.sample(n);
        let g = dprobs.sample(n);
        let o = out.sample_mut(n);
        for i in 0..v {
            let dot: F = (0..c).map(|k| p[k * v + i] * g[k * v + i]).sum();
            for k in 0..c {
                o[k * v + i] = p[k * v + i] * (g[k * v + i] - dot);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aux_configs_partition_layers() {
        assert!(SkipConfig::AUX1.is_complementary(&SkipConfig::AUX2));
        assert!(!SkipConfig::MAIN.is_complementary(&SkipConfig::AUX1));
        let mut all = SkipConfig::AUX1.skip_layers();
        all.extend(SkipConfig::AUX2.skip_layers());
        all.sort();
        assert_eq!(all, vec![1, 2, 3, 4]);
    }

    #[test]
    fn consumed_levels_follow_layer_mapping() {
        assert_eq!(SkipConfig::MAIN.consumed_levels(), vec![1, 2, 3, 4, 5]);
        assert_eq!(SkipConfig::AUX1.consumed_levels(), vec![2, 4, 5]);
        assert_eq!(SkipConfig::AUX2.consumed_levels(), vec![1, 3, 5]);
    }

    #[test]
    fn spec_validation() {
        let mut spec = ModelSpec::new(Role::Main, &ArchConfig::default());
        assert!(spec.validate().is_ok());
        spec.num_levels = 4;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        assert!(check_patch_dims([112, 112, 80]).is_ok());
        assert!(matches!(check_patch_dims([30, 32, 32]), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_gradient_matches_finite_difference() {
        let logits = Tensor::<f64>::from_vec(1, 2, [3, 1, 1], vec![0.1, -2.0, 3.0, 0.4, 0.0, -1.0]).unwrap();
        let w = [0.3, -0.5, 1.2, 0.7, -0.1, 0.9];
        let f = |l: &Tensor<f64>| -> f64 { softmax(l).data().iter().zip(&w).map(|(a, b)| a * b).sum() };
        let p = softmax(&logits);
        let g = softmax_backward(&p, &Tensor::from_vec(1, 2, [3, 1, 1], w.to_vec()).unwrap());
        for i in 0..6 {
            let mut lp = logits.clone();
            lp.data_mut()[i] += 1e-6;
            let mut lm = logits.clone();
            lm.data_mut()[i] -= 1e-6;
            let fd = (f(&lp) - f(&lm)) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }
}
