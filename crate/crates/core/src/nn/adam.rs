use serde::{Deserialize, Serialize};

use super::{Scalar, Trainable};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments live on each parameter, so one
/// optimizer value can drive any model.
#[derive(Clone, Copy, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config }
    }

    /// Applies one update at learning rate `lr` and zeroes all gradients.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step<S: Scalar>(&self, model: &mut impl Trainable<S>, lr: f64) -> Result<()> {
        for p in model.params() {
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(format!("{}[{i}]", p.name)));
            }
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        let (b1, b2) = (S::lit(beta1), S::lit(beta2));
        for p in model.params_mut() {
            p.step += 1;
            let t = p.step as i32;
            let c1 = S::lit(1.0 - beta1.powi(t));
            let c2 = S::lit(1.0 - beta2.powi(t));
            let lr = S::lit(lr);
            let eps = S::lit(eps);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                let m = b1 * p.first_moment[i] + (S::one() - b1) * g;
                let v = b2 * p.second_moment[i] + (S::one() - b2) * g * g;
                p.first_moment[i] = m;
                p.second_moment[i] = v;
                p.value[i] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                p.grad[i] = S::zero();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    struct One(Param<f64>);

    impl Trainable<f64> for One {
        fn params(&self) -> Vec<&Param<f64>> {
            vec![&self.0]
        }
        fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
            vec![&mut self.0]
        }
    }

    fn scalar(value: f64) -> One {
        let mut p = Param::zeros("w", &[1]);
        p.value[0] = value;
        One(p)
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut m = scalar(0.7);
        for _ in 0..5 {
            Adam::default().step(&mut m, 1e-2).unwrap();
        }
        assert_eq!(m.0.value[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 after correction: Δ = lr / (1 + 1e-8)
        let mut m = scalar(0.0);
        m.0.grad[0] = 1.0;
        Adam::default().step(&mut m, 1e-3).unwrap();
        assert!((m.0.value[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(m.0.grad[0], 0.0);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut m = scalar(1.0);
        m.0.grad[0] = f64::NAN;
        let err = Adam::default().step(&mut m, 1e-3).unwrap_err();
        assert!(err.to_string().contains("w[0]"), "{err}");
        assert_eq!(m.0.value[0], 1.0);
    }
}
