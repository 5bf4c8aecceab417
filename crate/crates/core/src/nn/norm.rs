use serde::{Deserialize, Serialize};

use super::{join, Module, Param};
use crate::real::Real;
use crate::tensor::Tensor;

/// Feature normalisation applied after every convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Statistics over batch and space, running averages at evaluation.
    #[default]
    Batch,
    /// Statistics over space per sample and channel.
    Instance,
    None,
}

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

struct Standardized<F> {
    xhat: Tensor<F>,
    means: Vec<f64>,
    vars: Vec<f64>,
    inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
struct NormCache<F> {
    xhat: Tensor<F>,
    /// One entry per normalisation group.
    inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Norm<F> {
    kind: NormKind,
    channels: usize,
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Param<F>,
    pub running_var: Param<F>,
    cache: Option<NormCache<F>>,
}

impl<F: Real> Norm<F> {
    pub fn new(kind: NormKind, channels: usize) -> Self {
        Self {
            kind,
            channels,
            gamma: Param::filled(vec![channels], F::one()),
            beta: Param::filled(vec![channels], F::zero()),
            running_mean: Param::buffer(vec![channels], F::zero()),
            running_var: Param::buffer(vec![channels], F::one()),
            cache: None,
        }
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    fn affine(&self, x: &mut Tensor<F>) {
        for n in 0..x.batch() {
            for c in 0..self.channels {
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                x.channel_mut(n, c).iter_mut().for_each(|e| *e = *e * g + b);
            }
        }
    }

    /// Evaluation-mode forward (running statistics for batch norm).
    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        match self.kind {
            NormKind::None => x.clone(),
            NormKind::Instance => {
                let mut y = self.standardize(x).xhat;
                self.affine(&mut y);
                y
            }
            NormKind::Batch => {
                let mut y = x.clone();
                for c in 0..self.channels {
                    let mean = self.running_mean.value[c].to_f64c();
                    let inv = 1.0 / (self.running_var.value[c].to_f64c() + EPS).sqrt();
                    for n in 0..x.batch() {
                        apply(y.channel_mut(n, c), mean, inv);
                    }
                }
                self.affine(&mut y);
                y
            }
        }
    }

    /// x̂ with batch (or per-instance) statistics.
    fn standardize(&self, x: &Tensor<F>) -> Standardized<F> {
        let mut xhat = x.clone();
        let (mut means, mut vars, mut inv_std) = (Vec::new(), Vec::new(), Vec::new());
        match self.kind {
            NormKind::Instance => {
                for n in 0..x.batch() {
                    for c in 0..self.channels {
                        let (m, var) = moments(std::iter::once(x.channel(n, c)));
                        let inv = 1.0 / (var + EPS).sqrt();
                        apply(xhat.channel_mut(n, c), m, inv);
                        means.push(m);
                        vars.push(var);
                        inv_std.push(inv);
                    }
                }
            }
            NormKind::Batch => {
                for c in 0..self.channels {
                    let (m, var) = moments((0..x.batch()).map(|n| x.channel(n, c)));
                    let inv = 1.0 / (var + EPS).sqrt();
                    for n in 0..x.batch() {
                        apply(xhat.channel_mut(n, c), m, inv);
                    }
                    means.push(m);
                    vars.push(var);
                    inv_std.push(inv);
                }
            }
            NormKind::None => unreachable!("standardize without normalisation"),
        }
        Standardized {
            xhat,
            means,
            vars,
            inv_std,
        }
    }

    /// Training-mode forward; updates running statistics for batch norm.
    pub fn forward_train(&mut self, x: &Tensor<F>) -> Tensor<F> {
        if self.kind == NormKind::None {
            return x.clone();
        }
        let Standardized {
            xhat,
            means,
            vars,
            inv_std,
        } = self.standardize(x);
        if self.kind == NormKind::Batch {
            let count = (x.batch() * x.voxels()) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for c in 0..self.channels {
                let rm = &mut self.running_mean.value[c];
                *rm = F::from_f64c((1.0 - MOMENTUM) * rm.to_f64c() + MOMENTUM * means[c]);
                let rv = &mut self.running_var.value[c];
                *rv = F::from_f64c((1.0 - MOMENTUM) * rv.to_f64c() + MOMENTUM * vars[c] * unbias);
            }
        }
        let mut y = xhat.clone();
        self.affine(&mut y);
        self.cache = Some(NormCache { xhat, inv_std });
        y
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        if self.kind == NormKind::None {
            return dy.clone();
        }
        let NormCache { xhat, inv_std } = self.cache.take().expect("Norm::backward without forward_train");
        let mut dx = dy.clone();
        let batch = dy.batch();
        for c in 0..self.channels {
            let gamma = self.gamma.value[c].to_f64c();
            let groups: Vec<Vec<usize>> = match self.kind {
                NormKind::Batch => vec![(0..batch).collect()],
                _ => (0..batch).map(|n| vec![n]).collect(),
            };
            for members in groups {
                let inv = match self.kind {
                    NormKind::Batch => inv_std[c],
                    _ => inv_std[members[0] * self.channels + c],
                };
                let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
                for &n in &members {
                    for (&g, &h) in dy.channel(n, c).iter().zip(xhat.channel(n, c)) {
                        let g = g.to_f64c();
                        sum_dy += g;
                        sum_dy_xhat += g * h.to_f64c();
                    }
                }
                self.gamma.grad[c] += F::from_f64c(sum_dy_xhat);
                self.beta.grad[c] += F::from_f64c(sum_dy);
                let m = (members.len() * dy.voxels()) as f64;
                let scale = gamma * inv / m;
                for &n in &members {
                    let xh = xhat.channel(n, c);
                    let out = dx.channel_mut(n, c);
                    for (o, &h) in out.iter_mut().zip(xh) {
                        let g = o.to_f64c();
                        *o = F::from_f64c(scale * (m * g - sum_dy - h.to_f64c() * sum_dy_xhat));
                    }
                }
            }
        }
        dx
    }
}

fn moments<'a, F: Real>(slices: impl Iterator<Item = &'a [F]> + Clone) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for s in slices.clone() {
        n += s.len();
        sum += s.iter().map(|v| v.to_f64c()).sum::<f64>();
    }
    let mean = sum / n as f64;
    let mut ss = 0.0;
    for s in slices {
        ss += s.iter().map(|v| (v.to_f64c() - mean).powi(2)).sum::<f64>();
    }
    (mean, ss / n as f64)
}

fn apply<F: Real>(data: &mut [F], mean: f64, inv: f64) {
    for e in data.iter_mut() {
        *e = F::from_f64c((e.to_f64c() - mean) * inv);
    }
}

impl<F: Real> Module<F> for Norm<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        if self.kind == NormKind::None {
            return;
        }
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        if self.kind == NormKind::Batch {
            f(&join(prefix, "running_mean"), &self.running_mean);
            f(&join(prefix, "running_var"), &self.running_var);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        if self.kind == NormKind::None {
            return;
        }
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        if self.kind == NormKind::Batch {
            f(&join(prefix, "running_mean"), &mut self.running_mean);
            f(&join(prefix, "running_var"), &mut self.running_var);
        }
    }
}
