//! Minimal layer library with hand-written backward passes.
//!
//! Layers cache whatever their backward pass needs during `forward_train`
//! and accumulate parameter gradients into [`Param::grad`] on `backward`.

mod conv;
mod norm;

pub use conv::{Conv3d, ConvTranspose3d};
pub use norm::{Norm, NormKind};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::real::Real;

/// A named tensor of model state.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub value: Vec<F>,
    pub grad: Vec<F>,
    pub shape: Vec<usize>,
    /// Buffers (e.g. running statistics) are stored but never optimized.
    pub trainable: bool,
}

impl<F: Real> Param<F> {
    pub fn new(shape: Vec<usize>, value: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![F::zero(); value.len()];
        Self {
            value,
            grad,
            shape,
            trainable: true,
        }
    }

    pub fn filled(shape: Vec<usize>, v: F) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    pub fn buffer(shape: Vec<usize>, v: F) -> Self {
        let n = shape.iter().product();
        Self {
            value: vec![v; n],
            grad: Vec::new(),
            shape,
            trainable: false,
        }
    }

    /// He-normal initialisation with the given fan-in.
    pub fn kaiming<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let value = (0..n).map(|_| F::from_f64c(normal.sample(rng))).collect();
        Self::new(shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }
}

/// Anything that owns parameters addressable by a dotted path.
pub trait Module<F: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));

    /// Number of trainable scalars.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// In-place ReLU.
pub(crate) fn relu_inplace<F: Real>(data: &mut [F]) {
    for v in data.iter_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Masks `grad` by the positive entries of a ReLU output.
pub(crate) fn relu_backward<F: Real>(output: &[F], grad: &mut [F]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= F::zero() {
            *g = F::zero();
        }
    }
}
