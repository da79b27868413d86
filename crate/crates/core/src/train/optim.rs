//! SGD with momentum and L2 weight decay, and the warm-up + step-decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::model::ParamMut;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    /// Epochs at which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<f64>,
    pub decay_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { base_lr: 0.05, warmup_epochs: 5.0, decay_epochs: vec![30.0, 60.0, 90.0], decay_factor: 0.1 }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { base_lr: lr, warmup_epochs: 0.0, decay_epochs: vec![], decay_factor: 0.1 }
    }

    /// Rate at a fractional epoch: linear ramp from 0 during warm-up, then step decay.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        let epoch = epoch.max(0.0);
        if epoch < self.warmup_epochs {
            return self.base_lr * epoch / self.warmup_epochs;
        }
        let passed = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.base_lr * self.decay_factor.powi(passed as i32)
    }
}

/// `v ← μv + g + λw`, then `w ← w − lr·v`; `λ` only for parameters flagged for decay.
#[derive(Clone, Debug)]
pub struct Sgd<T = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<ParamMut<'_, T>>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return shape_err(format!("{} parameters but {} gradients", params.len(), grads.len()));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        if self.velocity.len() != grads.len() {
            return shape_err("optimizer state does not match the parameter list");
        }
        let (mu, lr) = (T::lit(self.momentum), T::lit(lr));
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.tensor.shape() != g.shape() || v.shape() != g.shape() {
                return shape_err(format!("gradient {} does not match parameter {} ({})", g.shape(), p.name, p.tensor.shape()));
            }
            let wd = if p.decay { T::lit(self.weight_decay) } else { T::zero() };
            let w = p.tensor.data_mut();
            for ((w, &g), v) in w.iter_mut().zip(g.data()).zip(v.data_mut()) {
                *v = mu * *v + g + wd * *w;
                *w = *w - lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn one(decay: bool, w: &mut Tensor<f64>) -> Vec<ParamMut<'_, f64>> {
        vec![ParamMut { name: "w".into(), tensor: w, decay }]
    }

    #[test]
    fn vanilla_step() {
        let mut w = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let g = vec![Tensor::filled(Shape::new(1, 1, 1, 1), 1.0)];
        Sgd::new(0.0, 0.0).step(one(true, &mut w), &g, 1.0).unwrap();
        assert_eq!(w.data(), &[-1.0]);
    }

    #[test]
    fn momentum_recurrence() {
        let mut w = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let g = vec![Tensor::filled(Shape::new(1, 1, 1, 1), 1.0)];
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(one(true, &mut w), &g, 1.0).unwrap();
        opt.step(one(true, &mut w), &g, 1.0).unwrap();
        assert!((w.data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn decay_only_when_flagged() {
        let g = vec![Tensor::zeros(Shape::new(1, 1, 1, 1))];
        let mut a = Tensor::filled(Shape::new(1, 1, 1, 1), 2.0);
        Sgd::new(0.0, 0.5).step(one(true, &mut a), &g, 1.0).unwrap();
        assert_eq!(a.data(), &[1.0]);
        let mut b = Tensor::filled(Shape::new(1, 1, 1, 1), 2.0);
        Sgd::new(0.0, 0.5).step(one(false, &mut b), &g, 1.0).unwrap();
        assert_eq!(b.data(), &[2.0]);
    }

    #[test]
    fn schedule_points() {
        let s = LrSchedule { base_lr: 0.4, ..Default::default() };
        assert_eq!(s.lr_at(0.0), 0.0);
        assert!((s.lr_at(2.5) - 0.2).abs() < 1e-12);
        assert!((s.lr_at(31.0) - 0.04).abs() < 1e-12);
        assert!((s.lr_at(95.0) - 0.0004).abs() < 1e-12);
    }
}
