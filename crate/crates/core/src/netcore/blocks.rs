//! Building blocks of the V-Net: conv/norm/ReLU units and residual stages.

use rand::Rng;

use crate::error::Result;
use crate::nn::{join, relu_backward, relu_inplace, Conv3d, ConvTranspose3d, Module, Norm, NormKind, Param};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub(crate) enum Op<F> {
    Conv(Conv3d<F>),
    Up(ConvTranspose3d<F>),
}

/// Linear op → normalisation → ReLU.
#[derive(Clone, Debug)]
pub(crate) struct Unit<F> {
    op: Op<F>,
    norm: Norm<F>,
    output: Option<Tensor<F>>,
}

impl<F: Real> Unit<F> {
    pub fn conv<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: usize, stride: usize, norm: NormKind, rng: &mut R) -> Self {
        let padding = if stride == 1 { kernel / 2 } else { 0 };
        Self {
            op: Op::Conv(Conv3d::new(cin, cout, kernel, stride, padding, norm == NormKind::None, rng)),
            norm: Norm::new(norm, cout),
            output: None,
        }
    }

    pub fn up<R: Rng + ?Sized>(cin: usize, cout: usize, norm: NormKind, rng: &mut R) -> Self {
        Self {
            op: Op::Up(ConvTranspose3d::new(cin, cout, norm == NormKind::None, rng)),
            norm: Norm::new(norm, cout),
            output: None,
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let z = match &self.op {
            Op::Conv(c) => c.forward(x)?,
            Op::Up(u) => u.forward(x)?,
        };
        let mut y = self.norm.forward(&z);
        relu_inplace(y.data_mut());
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let z = match &mut self.op {
            Op::Conv(c) => c.forward_train(x)?,
            Op::Up(u) => u.forward_train(x)?,
        };
        let mut y = self.norm.forward_train(&z);
        relu_inplace(y.data_mut());
        self.output = Some(y.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let out = self.output.take().expect("Unit::backward without forward_train");
        let mut g = dy.clone();
        relu_backward(out.data(), g.data_mut());
        let g = self.norm.backward(&g);
        match &mut self.op {
            Op::Conv(c) => c.backward(&g),
            Op::Up(u) => u.backward(&g),
        }
    }
}

impl<F: Real> Module<F> for Unit<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        match &self.op {
            Op::Conv(c) => c.visit(&join(prefix, "conv"), f),
            Op::Up(u) => u.visit(&join(prefix, "up"), f),
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        match &mut self.op {
            Op::Conv(c) => c.visit_mut(&join(prefix, "conv"), f),
            Op::Up(u) => u.visit_mut(&join(prefix, "up"), f),
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// A stack of 3×3×3 units. With two or more units the output is
/// `t + rest(t)` where `t` is the first unit's output.
#[derive(Clone, Debug)]
pub(crate) struct Stage<F> {
    units: Vec<Unit<F>>,
}

impl<F: Real> Stage<F> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, depth: usize, norm: NormKind, rng: &mut R) -> Self {
        let units = (0..depth)
            .map(|i| Unit::conv(if i == 0 { cin } else { cout }, cout, 3, 1, norm, rng))
            .collect();
        Self { units }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let t = self.units[0].forward(x)?;
        if self.units.len() == 1 {
            return Ok(t);
        }
        let mut r = t.clone();
        for u in &self.units[1..] {
            r = u.forward(&r)?;
        }
        r.add_assign(&t);
        Ok(r)
    }

    pub fn forward_train(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let t = self.units[0].forward_train(x)?;
        if self.units.len() == 1 {
            return Ok(t);
        }
        let mut r = t.clone();
        for u in &mut self.units[1..] {
            r = u.forward_train(&r)?;
        }
        r.add_assign(&t);
        Ok(r)
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let (first, rest) = self.units.split_first_mut().expect("non-empty stage");
        if rest.is_empty() {
            return first.backward(dy);
        }
        let mut dt = dy.clone();
        let mut dr = dy.clone();
        for u in rest.iter_mut().rev() {
            dr = u.backward(&dr);
        }
        dt.add_assign(&dr);
        first.backward(&dt)
    }
}

impl<F: Real> Module<F> for Stage<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        for (i, u) in self.units.iter().enumerate() {
            u.visit(&join(prefix, &format!("unit{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, u) in self.units.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &format!("unit{i}")), f);
        }
    }
}
