//! Adam with optional exponential learning-rate decay and Polyak averaging.

use crate::autodiff::Array;
use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Array>,
    v: Vec<Array>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Array]) -> Self {
        let zeros = |p: &&Array| Array::zeros(p.shape());
        Self {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected update of every parameter against its gradient.
    pub fn step(&mut self, params: &mut [&mut Array], grads: &[Array]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return contract(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.len() != g.len() || p.len() != m.len() {
                return contract("gradient shape does not match its parameter");
            }
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut());
            for (((p, &g), m), v) in iter {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of parameter values.
#[derive(Clone, Debug)]
pub struct PolyakAverage {
    decay: f64,
    average: Vec<Array>,
}

impl PolyakAverage {
    pub fn new(decay: f64, params: &[&Array]) -> Self {
        Self {
            decay,
            average: params.iter().map(|&p| p.clone()).collect(),
        }
    }

    pub fn update(&mut self, params: &[&Array]) {
        for (a, p) in self.average.iter_mut().zip(params) {
            for (a, &p) in a.data_mut().iter_mut().zip(p.data()) {
                *a = self.decay * *a + (1.0 - self.decay) * p;
            }
        }
    }

    pub fn averaged(&self) -> &[Array] {
        &self.average
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Array::from_vec(vec![1.0, -2.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &[&p]);
        adam.step(&mut [&mut p], &[Array::from_vec(vec![3.0, -0.5])]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
        assert!((p.data()[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Array::from_vec(vec![5.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &[&p]);
        for _ in 0..2000 {
            let g = Array::from_vec(vec![2.0 * (p.data()[0] - 1.5)]);
            adam.step(&mut [&mut p], &[g]).unwrap();
        }
        assert!((p.data()[0] - 1.5).abs() < 1e-3);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Array::from_vec(vec![0.25]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &[&p]);
        adam.step(&mut [&mut p], &[Array::zeros(&[1])]).unwrap();
        assert_eq!(p.data(), &[0.25]);
    }

    #[test]
    fn polyak_tracks_average() {
        let p = Array::from_vec(vec![0.0]);
        let mut avg = PolyakAverage::new(0.5, &[&p]);
        avg.update(&[&Array::from_vec(vec![2.0])]);
        assert_eq!(avg.averaged()[0].data(), &[1.0]);
    }
}
