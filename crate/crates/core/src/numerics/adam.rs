use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    /// Decoupled: applied to the parameters, never folded into the gradient.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update. A non-finite gradient leaves both parameters and
    /// state untouched and returns an error.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        for (what, len) in [("parameters", params.len()), ("gradients", grads.len())] {
            if len != self.first.len() {
                return Err(Error::Shape {
                    what,
                    expected: self.first.len(),
                    got: len,
                });
            }
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient component {i} at optimizer step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step as f64);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * (m_hat / (libm::sqrt(v_hat) + eps) + weight_decay * *p);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(lr: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            weight_decay: 0.0,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = vec![1.0, -2.0, 0.5];
        let before = params.clone();
        let mut adam = Adam::new(plain(1e-3), 3).unwrap();
        for _ in 0..10 {
            adam.step(&mut params, &[0.0; 3]).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(adam.steps(), 10);
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let mut params = vec![0.0, 0.0, 0.0];
        let mut adam = Adam::new(plain(0.01), 3).unwrap();
        adam.step(&mut params, &[3.0, -0.2, 50.0]).unwrap();
        for (p, s) in params.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((p - 0.01 * s).abs() < 1e-8, "{p}");
        }
    }

    #[test]
    fn converges_on_one_dimensional_quadratic() {
        // Reference recurrence run offline ends at x = 2.98066 after 100 steps.
        let mut x = vec![0.0];
        let mut adam = Adam::new(plain(0.1), 1).unwrap();
        for _ in 0..100 {
            let g = 2.0 * (x[0] - 3.0);
            adam.step(&mut x, &[g]).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 0.1);
        assert!((x[0] - 2.980_655_437_527_812).abs() < 1e-9);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = vec![2.0];
        let cfg = AdamConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, 1).unwrap();
        adam.step(&mut p, &[0.0]).unwrap();
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut p = vec![1.0, 1.0];
        let mut adam = Adam::new(plain(0.1), 2).unwrap();
        let err = adam.step(&mut p, &[0.5, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        assert!(Adam::new(plain(0.0), 1).is_err());
        let mut adam = Adam::new(plain(0.1), 2).unwrap();
        assert!(adam.step(&mut [0.0], &[0.0, 0.0]).is_err());
    }
}
