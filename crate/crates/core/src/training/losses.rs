//! Supervised Dice loss, unsupervised cross pseudo-label MSE, the Gaussian
//! ramp-up and the weighted total, each with an analytic gradient w.r.t.
//! the foreground probabilities.

use serde::{Deserialize, Serialize};

use super::sharpen::{sharpen_derivative, sharpen_value, PseudoLabel};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::netcore::ProbabilityMap;
use crate::real::Real;
use crate::tensor::Tensor;

/// Smoothing term in the Dice denominator.
pub const DICE_EPS: f64 = 1e-5;

/// How per-case supervised losses combine over the labeled sub-batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn scale(self, n: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / n as f64,
            Reduction::Sum => 1.0,
        }
    }
}

fn check_labels<F: Real>(p: &ProbabilityMap<F>, y: &Tensor<F>) -> Result<()> {
    if y.channels() != 1 || y.dims() != p.dims() || y.batch() > p.batch() {
        return Err(Error::Shape(format!(
            "labels [{}, {}, {:?}] do not match probability map [{}, _, {:?}]",
            y.batch(),
            y.channels(),
            y.dims(),
            p.batch(),
            p.dims()
        )));
    }
    Ok(())
}

/// `1 - 2 Σ p y / (Σ p + Σ y + ε)` for one case.
pub fn dice_loss_single<F: Real>(p: &[F], y: &[F]) -> f64 {
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(y) {
        let (a, b) = (a.to_f64c(), b.to_f64c());
        inter += a * b;
        sp += a;
        sy += b;
    }
    1.0 - 2.0 * inter / (sp + sy + DICE_EPS)
}

/// Dice loss of the foreground channel, averaged over the cases in `y`.
///
/// `y` holds one binary channel per case and may cover only the leading
/// (labeled) part of the map's batch.
pub fn dice_loss<F: Real>(p: &ProbabilityMap<F>, y: &Tensor<F>) -> Result<f64> {
    check_labels(p, y)?;
    if y.batch() == 0 {
        return Err(Error::Shape("dice loss of an empty batch".into()));
    }
    let total: f64 = (0..y.batch())
        .map(|n| dice_loss_single(p.foreground(n), y.channel(n, 0)))
        .sum();
    Ok(total / y.batch() as f64)
}

/// Adds `scale * dDice/dp` for each labeled case into `grad` (foreground layout).
fn dice_grad<F: Real>(p: &ProbabilityMap<F>, y: &Tensor<F>, scale: f64, grad: &mut Tensor<F>) {
    for n in 0..y.batch() {
        let pf = p.foreground(n);
        let yf = y.channel(n, 0);
        let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
        for (&a, &b) in pf.iter().zip(yf) {
            let (a, b) = (a.to_f64c(), b.to_f64c());
            inter += a * b;
            sp += a;
            sy += b;
        }
        let s = sp + sy + DICE_EPS;
        let c = 2.0 * inter / (s * s);
        for (g, &b) in grad.channel_mut(n, 1).iter_mut().zip(yf) {
            *g += F::from_f64c(scale * (c - 2.0 * b.to_f64c() / s));
        }
    }
}

/// Sum of the Dice losses of the three maps against the ground truth.
///
/// `y` is `None` for unlabeled input, which is a usage error.
pub fn supervised_loss<F: Real>(
    p_main: &ProbabilityMap<F>,
    p_aux1: &ProbabilityMap<F>,
    p_aux2: &ProbabilityMap<F>,
    y: Option<&Tensor<F>>,
    reduction: Reduction,
) -> Result<f64> {
    let y = y.ok_or_else(|| Error::Usage("supervised loss requires ground-truth labels".into()))?;
    let n = y.batch();
    let per = |p: &ProbabilityMap<F>| -> Result<f64> { Ok(dice_loss(p, y)? * n as f64 * reduction.scale(n)) };
    Ok(per(p_main)? + per(p_aux1)? + per(p_aux2)?)
}

/// Voxelwise mean squared error between a pseudo-label and a map.
pub fn mse<F: Real>(target: &PseudoLabel<F>, p: &ProbabilityMap<F>) -> Result<f64> {
    let t = target.map();
    if !t.same_shape(p) {
        return Err(Error::Shape(format!(
            "pseudo-label {:?}x{} vs map {:?}x{}",
            t.dims(),
            t.batch(),
            p.dims(),
            p.batch()
        )));
    }
    let a = t.tensor().data();
    let b = p.tensor().data();
    let ss: f64 = a.iter().zip(b).map(|(&x, &y)| (x.to_f64c() - y.to_f64c()).powi(2)).sum();
    Ok(ss / a.len() as f64)
}

/// `MSE(yM, pA1) + MSE(yM, pA2) + MSE(yA2, pA1) + MSE(yA1, pA2)`.
pub fn unsupervised_loss<F: Real>(
    p_main: &ProbabilityMap<F>,
    p_aux1: &ProbabilityMap<F>,
    p_aux2: &ProbabilityMap<F>,
    y_main: &PseudoLabel<F>,
    y_aux1: &PseudoLabel<F>,
    y_aux2: &PseudoLabel<F>,
) -> Result<f64> {
    if !p_main.same_shape(p_aux1) || !p_main.same_shape(p_aux2) {
        return Err(Error::Shape("probability maps differ in shape".into()));
    }
    Ok(mse(y_main, p_aux1)? + mse(y_main, p_aux2)? + mse(y_aux2, p_aux1)? + mse(y_aux1, p_aux2)?)
}

/// Gaussian warm-up `λ_max · exp(-5 (1 - t/L)²)` with `L` the ramp length.
pub fn rampup_weight(iteration: usize, config: &TrainConfig) -> f64 {
    let length = config.rampup_length();
    if length == 0 {
        return config.lambda_u_max;
    }
    let t = (iteration as f64 / length as f64).clamp(0.0, 1.0);
    config.lambda_u_max * (-5.0 * (1.0 - t).powi(2)).exp()
}

/// `λ_s · L_sup + λ_u(t) · L_unsup`.
pub fn total_loss(sup: f64, unsup: f64, iteration: usize, config: &TrainConfig) -> f64 {
    config.lambda_s * sup + rampup_weight(iteration, config) * unsup
}

/// Loss components of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub unsup: f64,
    pub lambda_u: f64,
    pub total: f64,
}

/// Which terms participate in the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Objective {
    pub lambda_s: f64,
    pub lambda_u: f64,
    pub temperature: f64,
    pub detach: bool,
    pub reduction: Reduction,
}

/// Full three-model objective and its gradients w.r.t. each probability map.
///
/// `maps` are ordered main, aux1, aux2 over the whole batch; `labels`
/// covers the leading labeled cases.
pub(crate) fn cc_objective<F: Real>(
    maps: &[ProbabilityMap<F>],
    labels: &Tensor<F>,
    obj: &Objective,
) -> Result<(LossBreakdown, Vec<Tensor<F>>)> {
    let [pm, pa1, pa2] = maps else {
        return Err(Error::Usage("complementary objective needs three maps".into()));
    };
    let mut grads: Vec<Tensor<F>> = maps.iter().map(|m| Tensor::zeros(m.batch(), 2, m.dims())).collect();

    let mut sup = 0.0;
    if labels.batch() > 0 {
        sup = supervised_loss(pm, pa1, pa2, Some(labels), obj.reduction)?;
        let scale = obj.lambda_s * obj.reduction.scale(labels.batch());
        for (m, g) in maps.iter().zip(grads.iter_mut()) {
            dice_grad(m, labels, scale, g);
        }
    }

    let fg: Vec<Vec<f64>> = maps
        .iter()
        .map(|m| m.foreground_all().iter().map(|v| v.to_f64c()).collect())
        .collect();
    let sharp: Vec<Vec<f64>> = fg
        .iter()
        .map(|f| f.iter().map(|&v| sharpen_value(v, obj.temperature)).collect())
        .collect();
    let count = fg[0].len() as f64;
    // (pseudo-label source, prediction) pairs
    const TERMS: [(usize, usize); 4] = [(0, 1), (0, 2), (2, 1), (1, 2)];
    let mut unsup = 0.0;
    let mut dfg = vec![vec![0.0f64; fg[0].len()]; 3];
    for (src, dst) in TERMS {
        let mut ss = 0.0;
        for i in 0..fg[0].len() {
            let diff = sharp[src][i] - fg[dst][i];
            ss += diff * diff;
            let g = obj.lambda_u * 2.0 * diff / count;
            dfg[dst][i] -= g;
            if !obj.detach {
                dfg[src][i] += g * sharpen_derivative(fg[src][i], obj.temperature);
            }
        }
        unsup += ss / count;
    }
    if obj.lambda_u != 0.0 {
        let v = maps[0].tensor().voxels();
        for (r, g) in grads.iter_mut().enumerate() {
            for n in 0..g.batch() {
                for (dst, &src) in g.channel_mut(n, 1).iter_mut().zip(&dfg[r][n * v..(n + 1) * v]) {
                    *dst += F::from_f64c(src);
                }
            }
        }
    }
    let total = obj.lambda_s * sup + obj.lambda_u * unsup;
    Ok((
        LossBreakdown {
            sup,
            unsup,
            lambda_u: obj.lambda_u,
            total,
        },
        grads,
    ))
}

/// Supervised-only objective of the main model: its Dice loss on labeled cases.
pub(crate) fn supervised_only_objective<F: Real>(
    p_main: &ProbabilityMap<F>,
    labels: &Tensor<F>,
    reduction: Reduction,
) -> Result<(LossBreakdown, Tensor<F>)> {
    let n = labels.batch();
    let sup = dice_loss(p_main, labels)? * n as f64 * reduction.scale(n);
    let mut g = Tensor::zeros(p_main.batch(), 2, p_main.dims());
    dice_grad(p_main, labels, reduction.scale(n), &mut g);
    Ok((
        LossBreakdown {
            sup,
            unsup: 0.0,
            lambda_u: 0.0,
            total: sup,
        },
        g,
    ))
}
