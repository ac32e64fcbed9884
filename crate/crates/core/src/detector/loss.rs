use serde::{Deserialize, Serialize};

use crate::tensor::sigmoid_scalar;

/// Per-step loss split into its three terms; `total` is their plain sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub bbox: f64,
    pub mask: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(classification: f64, bbox: f64, mask: f64) -> Self {
        Self {
            classification,
            bbox,
            mask,
            total: classification + bbox + mask,
        }
    }
}

/// Binary cross-entropy on a logit, returning the loss and d loss / d logit.
pub fn bce_with_logits(x: f64, y: f64) -> (f64, f64) {
    let loss = x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
    (loss, sigmoid_scalar(x) - y)
}

/// `0.5 x^2` inside the unit interval, `|x| - 0.5` outside; returns the value
/// and its derivative.
pub fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Numerically stable softmax.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax cross-entropy against class `target`; returns the loss and the
/// gradient with respect to the logits.
pub(crate) fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let mut g = softmax(logits);
    g[target] -= 1.0;
    (lse - logits[target], g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smooth_l1_pieces() {
        assert_eq!(smooth_l1(0.0), (0.0, 0.0));
        assert_eq!(smooth_l1(0.5).0, 0.125);
        assert_eq!(smooth_l1(2.0).0, 1.5);
        assert_eq!(smooth_l1(-2.0), (1.5, -1.0));
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        for y in [0.0, 1.0, 0.3] {
            assert!((bce_with_logits(0.0, y).0 - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_large_logits_stay_finite() {
        let (l, g) = bce_with_logits(800.0, 0.0);
        assert!((l - 800.0).abs() < 1e-9 && (g - 1.0).abs() < 1e-12);
        let (l, _) = bce_with_logits(-800.0, 0.0);
        assert!(l >= 0.0 && l < 1e-300);
    }

    #[test]
    fn breakdown_total_is_sum() {
        let b = LossBreakdown::new(0.1, 0.2, 0.3);
        assert_eq!(b.total, 0.1 + 0.2 + 0.3);
    }

    fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let e = 1e-6;
        (f(x + e) - f(x - e)) / (2.0 * e)
    }

    proptest! {
        #[test]
        fn bce_gradient(x in -20.0f64..20.0, y in 0.0f64..=1.0) {
            let n = central(|v| bce_with_logits(v, y).0, x);
            prop_assert!((n - bce_with_logits(x, y).1).abs() < 1e-6);
        }

        #[test]
        fn smooth_l1_gradient(x in -3.0f64..3.0) {
            prop_assume!((x.abs() - 1.0).abs() > 1e-3);
            prop_assert!((central(|v| smooth_l1(v).0, x) - smooth_l1(x).1).abs() < 1e-6);
        }

        #[test]
        fn cross_entropy_gradient(l in prop::collection::vec(-5.0f64..5.0, 6), t in 0usize..6) {
            let (loss, g) = softmax_cross_entropy(&l, t);
            prop_assert!(loss >= 0.0);
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
            for k in 0..6 {
                let f = |v: f64| { let mut m = l.clone(); m[k] = v; softmax_cross_entropy(&m, t).0 };
                prop_assert!((central(f, l[k]) - g[k]).abs() < 1e-6);
            }
        }
    }
}
