//! SGD with momentum and learning-rate schedules.

use crate::{Float, Gradients, Var};

/// Learning rate as a function of the global step.
#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate to zero over `total_steps`.
    Cosine { total_steps: usize },
    /// Multiply by `gamma` at each listed step.
    Step { milestones: Vec<usize>, gamma: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { total_steps } => {
                let t = (step as f64 / (*total_steps).max(1) as f64).min(1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrSchedule::Step { milestones, gamma } => {
                let n = milestones.iter().filter(|&&m| step >= m).count();
                base * gamma.powi(n as i32)
            }
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay (dampening 0).
pub struct Sgd<T: Float> {
    vars: Vec<Var<T>>,
    velocity: Vec<Vec<T>>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<T: Float> Sgd<T> {
    pub fn new(vars: Vec<Var<T>>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = vars.iter().map(|v| vec![T::zero(); v.numel()]).collect();
        Sgd {
            vars,
            velocity,
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &Gradients<T>) {
        let lr = T::from_f64_lossy(self.lr);
        let mu = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = var.grad(grads) else { continue };
            let mut w = var.to_vec();
            for ((w, v), &g) in w.iter_mut().zip(vel.iter_mut()).zip(g) {
                let d = g + wd * *w;
                *v = mu * *v + d;
                *w -= lr * *v;
            }
            var.set_data(w);
        }
    }
}
