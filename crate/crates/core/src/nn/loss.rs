//! Scalar losses. Gradients are applied by the models, which fold them into
//! the sigmoid's pre-activation.

pub const BCE_CLAMP: f64 = 1e-7;

/// Binary cross-entropy of prediction `c` against label `y ∈ {0, 1}`, with
/// `c` clamped to `[1e-7, 1 - 1e-7]` first.
pub fn bce_loss(c: f64, y: f64) -> f64 {
    let c = c.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * c.ln() + (1.0 - y) * (1.0 - c).ln())
}

/// `(2/|M|) Σ 0.5 − |cᵢ − 0.5|`: 1 when every prediction is 0.5, 0 when all
/// are confident. Empty input contributes nothing.
pub fn edge_regularizer(predictions: &[f64]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let sum: f64 = predictions.iter().map(|c| 0.5 - (c - 0.5).abs()).sum();
    2.0 * sum / predictions.len() as f64
}

/// Derivative of one term of [`edge_regularizer`] w.r.t. `c`, before the
/// `2/|M|` factor.
#[inline]
pub fn edge_regularizer_slope(c: f64) -> f64 {
    if c > 0.5 {
        -1.0
    } else if c < 0.5 {
        1.0
    } else {
        0.0
    }
}

/// `|ln d − ln g|`.
pub fn log_l1(pred: f64, target: f64) -> f64 {
    (pred.ln() - target.ln()).abs()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        assert!(bce_loss(1.0 - 1e-7, 1.0) < 1e-6);
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        let clamped = bce_loss(0.0, 0.0);
        assert!(clamped.is_finite() && clamped > 0.0 && clamped < 1e-6);
        assert!(bce_loss(0.0, 1.0).is_finite());
    }

    #[test]
    fn regularizer_algebra() {
        assert_eq!(edge_regularizer(&[0.5; 7]), 1.0);
        assert_eq!(edge_regularizer(&[0.0, 1.0, 1.0, 0.0]), 0.0);
        assert_eq!(edge_regularizer(&[0.5, 0.5, 1.0, 1.0]), 0.5);
        assert_eq!(edge_regularizer(&[]), 0.0);
    }

    #[test]
    fn regularizer_stays_in_unit_interval() {
        for i in 0..=100 {
            let c = i as f64 / 100.0;
            let r = edge_regularizer(&[c, 1.0 - c * 0.3]);
            assert!((0.0..=1.0).contains(&r));
        }
    }
}
