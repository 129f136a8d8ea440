//! Adam with a linear-warmup-then-constant learning rate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every parameter with its gradient. Moments are kept in
    /// `f64` regardless of the parameter precision.
    pub fn step<S: Real>(&mut self, params: &mut [&mut Tensor<S>], grads: &[Vec<S>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} parameters, {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Shape("parameter set changed between steps".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if g.len() != p.len() || m.len() != p.len() {
                return Err(Error::Shape(format!("gradient of {} for parameter of {}", g.len(), p.len())));
            }
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = lr * (*mi / bc1) / (Float::sqrt(*vi / bc2) + self.eps);
                *x = S::lit(x.as_f64() - update);
            }
            if p.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericFault { op: "adam" });
            }
        }
        Ok(())
    }
}

/// Learning rate at 0-based `step`: ramps linearly to `base` over `warmup`
/// steps, then stays constant.
pub fn lr_at(step: usize, base: f64, warmup: usize) -> f64 {
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        base
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_schedule() {
        assert_eq!(lr_at(0, 1.0, 4), 0.25);
        assert_eq!(lr_at(3, 1.0, 4), 1.0);
        assert_eq!(lr_at(10, 1.0, 4), 1.0);
        assert_eq!(lr_at(0, 0.5, 0), 0.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias correction makes the first update exactly lr * sign(g)
        let mut p = Tensor::<f64>::vector(vec![1.0, -2.0]);
        let mut opt = Adam::default();
        opt.step(&mut [&mut p], &[vec![0.5, -3.0]], 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Tensor::<f64>::vector(vec![3.0]);
        let mut opt = Adam::default();
        for _ in 0..2000 {
            let g = vec![2.0 * (p.data()[0] - 1.0)];
            opt.step(&mut [&mut p], &[g], 0.01).unwrap();
        }
        assert!((p.data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let mut p = Tensor::<f32>::vector(vec![1.0]);
        assert!(Adam::default().step(&mut [&mut p], &[vec![1.0, 2.0]], 0.1).is_err());
    }
}
