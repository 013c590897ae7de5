//! Central-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Trainable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates: usize,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the analytic gradient against central differences on at least
/// `coordinates` parameters, drawn evenly from every tensor.
///
/// `loss(model, accumulate)` must return the loss and, when `accumulate` is
/// set, add its gradient into the parameters.
pub fn gradient_check<M: Trainable<f64>>(
    model: &mut M,
    mut loss: impl FnMut(&mut M, bool) -> f64,
    coordinates: usize,
    eps: f64,
    seed: u64,
) -> GradCheckReport {
    model.zero_grad();
    loss(model, true);
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
    model.zero_grad();

    let tensors = analytic.len();
    let per_tensor = coordinates.div_ceil(tensors.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        coordinates: 0,
        worst: String::new(),
    };
    for (t, grads) in analytic.iter().enumerate() {
        let picks: Vec<usize> = if grads.len() <= per_tensor {
            (0..grads.len()).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..grads.len())).collect()
        };
        for i in picks {
            let orig = model.params()[t].value[i];
            model.params_mut()[t].value[i] = orig + eps;
            let plus = loss(model, false);
            model.params_mut()[t].value[i] = orig - eps;
            let minus = loss(model, false);
            model.params_mut()[t].value[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(grads[i], numeric);
            report.coordinates += 1;
            if err > report.max_relative_error || report.worst.is_empty() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = format!("{}[{i}]", model.params()[t].name);
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    struct Quadratic(Param<f64>);

    impl Trainable<f64> for Quadratic {
        fn params(&self) -> Vec<&Param<f64>> {
            vec![&self.0]
        }
        fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
            vec![&mut self.0]
        }
    }

    fn quadratic() -> Quadratic {
        let mut p = Param::zeros("w", &[60]);
        for (i, v) in p.value.iter_mut().enumerate() {
            *v = i as f64 * 0.1 - 2.0;
        }
        Quadratic(p)
    }

    fn value(m: &Quadratic) -> f64 {
        m.0.value.iter().map(|w| w * w * w).sum()
    }

    #[test]
    fn exact_gradient_passes() {
        let mut m = quadratic();
        let r = gradient_check(
            &mut m,
            |m, acc| {
                if acc {
                    for i in 0..m.0.len() {
                        m.0.grad[i] += 3.0 * m.0.value[i] * m.0.value[i];
                    }
                }
                value(m)
            },
            50,
            1e-5,
            0,
        );
        assert!(r.max_relative_error < 1e-6, "{r:?}");
        assert!(r.coordinates >= 50);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut m = quadratic();
        let r = gradient_check(
            &mut m,
            |m, acc| {
                if acc {
                    for i in 0..m.0.len() {
                        m.0.grad[i] += 2.0 * m.0.value[i] * m.0.value[i];
                    }
                }
                value(m)
            },
            50,
            1e-5,
            0,
        );
        assert!(r.max_relative_error > 0.1);
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }
}
