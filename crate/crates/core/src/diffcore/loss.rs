use serde::{Deserialize, Serialize};

use crate::diffcore::graph::{softmax_values, Graph, Node};
use crate::diffcore::params::ParamStore;
use crate::error::{Error, Result};

/// Regression loss family. Every variant reduces by the mean over elements.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
    Mae,
    NllGaussian,
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(softmax_values(x))
}

/// Record a regression loss on the tape. For [`LossKind::NllGaussian`],
/// `pred` holds the means followed by the log-variances.
pub fn regression_loss(g: &mut Graph<'_>, kind: LossKind, pred: Node, target: Node) -> Result<Node> {
    match kind {
        LossKind::Mse => g.mse(pred, target),
        LossKind::Mae => g.mae(pred, target),
        LossKind::NllGaussian => g.nll_gaussian(pred, target),
    }
}

/// Evaluate a regression loss on plain slices.
pub fn regression_loss_value(kind: LossKind, pred: &[f64], target: &[f64]) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let p = g.input(pred.to_vec());
    let t = g.input(target.to_vec());
    let l = regression_loss(&mut g, kind, p, t)?;
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn softmax_uniform() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in p {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_reference_values() {
        // direct e^x normalisation, computed offline
        let p = softmax(&[-1.0, -2.0, -3.0]).unwrap();
        let expected = [0.665_240_955_774_821_6, 0.244_728_471_054_797_6, 0.090_030_573_170_380_46];
        for (a, b) in p.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_large_logits() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-300);
        assert!(p[1] < 1e-300);
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(matches!(softmax(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn regression_examples() {
        assert_eq!(regression_loss_value(LossKind::Mse, &[3.0, 0.0], &[1.0, 0.0]).unwrap(), 2.0);
        assert_eq!(regression_loss_value(LossKind::Mae, &[3.0], &[1.0]).unwrap(), 2.0);
        assert_eq!(regression_loss_value(LossKind::Mse, &[1.5, 2.0], &[1.5, 2.0]).unwrap(), 0.0);
        assert!(regression_loss_value(LossKind::Mse, &[1.0], &[1.0, 2.0]).is_err());
        assert!(regression_loss_value(LossKind::NllGaussian, &[1.0, 0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn nll_at_unit_variance() {
        // mean 0, log-variance 0, target 1: 0.5 * (1 + ln 2π)
        let v = regression_loss_value(LossKind::NllGaussian, &[0.0, 0.0], &[1.0]).unwrap();
        assert_abs_diff_eq!(v, 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln()), epsilon = 1e-14);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(x in prop::collection::vec(-50.0f64..50.0, 1..12)) {
            let p = softmax(&x).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn softmax_permutation_equivariant(x in prop::collection::vec(-20.0f64..20.0, 2..8), rot in 0usize..8) {
            let r = rot % x.len();
            let mut y = x.clone();
            y.rotate_left(r);
            let mut px = softmax(&x).unwrap();
            px.rotate_left(r);
            let py = softmax(&y).unwrap();
            for (a, b) in px.iter().zip(&py) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }

        #[test]
        fn self_loss_is_zero(x in prop::collection::vec(-1e3f64..1e3, 1..40)) {
            prop_assert_eq!(regression_loss_value(LossKind::Mse, &x, &x).unwrap(), 0.0);
            prop_assert_eq!(regression_loss_value(LossKind::Mae, &x, &x).unwrap(), 0.0);
        }
    }
}
