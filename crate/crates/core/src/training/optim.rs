use crate::nn::Module;
use crate::real::Real;

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug, Default)]
pub struct Sgd<F> {
    velocity: Vec<Vec<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new() -> Self {
        Self { velocity: Vec::new() }
    }

    /// `v ← μ v + (g + λ w)`, `w ← w − lr v` over all trainable parameters.
    pub fn step<M: Module<F>>(&mut self, model: &mut M, lr: f64, momentum: f64, weight_decay: f64) {
        let (lr, mu, wd) = (F::from_f64c(lr), F::from_f64c(momentum), F::from_f64c(weight_decay));
        let mut slot = 0;
        let velocity = &mut self.velocity;
        model.visit_mut("", &mut |_, p| {
            if !p.trainable {
                return;
            }
            if velocity.len() <= slot {
                velocity.push(vec![F::zero(); p.len()]);
            }
            let v = &mut velocity[slot];
            for ((w, g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vel = mu * *vel + *g + wd * *w;
                *w -= lr * *vel;
            }
            slot += 1;
        });
    }
}

/// Polynomial decay `lr₀ (1 − t/T)^power`.
pub fn poly_lr(base: f64, iteration: usize, max_iteration: usize, power: f64) -> f64 {
    if max_iteration == 0 {
        return base;
    }
    let frac = 1.0 - (iteration as f64 / max_iteration as f64).min(1.0);
    base * frac.powf(power)
}
