use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Step-decay learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub initial: f64,
    pub factor: f64,
    pub every_epochs: usize,
}

impl StepDecay {
    /// Learning rate in effect during the 1-based `epoch`; it is multiplied by
    /// `factor` once each time `every_epochs` epochs have completed.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = if self.every_epochs == 0 { 0 } else { epoch.saturating_sub(1) / self.every_epochs };
        let mut lr = self.initial;
        for _ in 0..steps {
            lr *= self.factor;
        }
        lr
    }
}

/// Classical (heavy-ball) momentum SGD: `v <- mu v + g; p <- p - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Vec<Tensor<T>>,
    pub momentum: T,
    pub learning_rate: T,
    pub decay_factor: T,
    pub decay_period_epochs: usize,
}

impl<T: Scalar> SgdState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, learning_rate: T, momentum: T) -> Result<Self> {
        if learning_rate < T::zero() || !learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be finite and >= 0, got {learning_rate}")));
        }
        Ok(Self {
            velocity: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
            momentum,
            learning_rate,
            decay_factor: T::lit(0.1),
            decay_period_epochs: 25,
        })
    }

    pub fn with_decay(mut self, factor: T, period_epochs: usize) -> Self {
        self.decay_factor = factor;
        self.decay_period_epochs = period_epochs;
        self
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            initial: self.learning_rate.as_f64(),
            factor: self.decay_factor.as_f64(),
            every_epochs: self.decay_period_epochs,
        }
    }

    /// Applies one momentum update with an explicit learning rate.
    pub fn step_with_lr(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: T) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return shape_err(
                "sgd_step",
                format!("{} params, {} grads, {} velocities", params.len(), grads.len(), self.velocity.len()),
            );
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return shape_err("sgd_step", format!("param {:?}, grad {:?}, velocity {:?}", p.shape(), g.shape(), v.shape()));
            }
        }
        let mu = self.momentum;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }

    /// Applies one update at the base learning rate.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        let lr = self.learning_rate;
        self.step_with_lr(params, grads, lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(v: f64) -> Tensor<f64> {
        Tensor::full(&[1], v)
    }

    #[test]
    fn zero_gradient_zero_velocity_is_noop() {
        let mut p = vec![Tensor::<f64>::from_fn(&[2, 2], |i| i as f64)];
        let before = p.clone();
        let mut sgd = SgdState::new(&p, 0.1, 0.99).unwrap();
        sgd.step(&mut p, &[Tensor::zeros(&[2, 2])]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn zero_momentum_is_plain_descent() {
        let mut p = vec![vec1(1.0)];
        let mut sgd = SgdState::new(&p, 0.5, 0.0).unwrap();
        sgd.step(&mut p, &[vec1(0.2)]).unwrap();
        assert_eq!(p[0].item(), 1.0 - 0.5 * 0.2);
    }

    #[test]
    fn two_steps_constant_gradient_unrolled() {
        // v1 = g, p1 = p0 - lr g; v2 = mu g + g, p2 = p1 - lr (1 + mu) g = p0 - lr g (2 + mu)
        let (p0, lr, mu, g) = (0.75, 0.1, 0.9, 0.3);
        let mut p = vec![vec1(p0)];
        let mut sgd = SgdState::new(&p, lr, mu).unwrap();
        sgd.step(&mut p, &[vec1(g)]).unwrap();
        sgd.step(&mut p, &[vec1(g)]).unwrap();
        assert!((p[0].item() - (p0 - lr * g * (2.0 + mu))).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = vec![Tensor::<f32>::from_fn(&[5], |i| i as f32 * 0.37)];
        let before = p.clone();
        let mut sgd = SgdState::new(&p, 0.0, 0.99).unwrap();
        for _ in 0..3 {
            sgd.step(&mut p, &[Tensor::full(&[5], 1.5)]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![vec1(0.0)];
        let mut sgd = SgdState::new(&p, 0.1, 0.9).unwrap();
        assert!(sgd.step(&mut p, &[Tensor::zeros(&[2])]).is_err());
        assert!(sgd.step(&mut p, &[]).is_err());
        assert!(SgdState::<f64>::new(&p, -1.0, 0.9).is_err());
    }

    #[test]
    fn step_decay_schedule() {
        let s = StepDecay { initial: 1e-5, factor: 0.1, every_epochs: 25 };
        assert_eq!(s.lr_at(1), 1e-5);
        assert_eq!(s.lr_at(25), 1e-5);
        assert!((s.lr_at(26) - 1e-6).abs() < 1e-20);
        assert!((s.lr_at(51) - 1e-7).abs() < 1e-21);
    }
}
