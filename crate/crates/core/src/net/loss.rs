//! Training objectives and their derivatives.

use super::layers::logistic;
use serde::{Deserialize, Serialize};

/// Shape parameters of the scaled-sigmoid overlap loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapLossParams {
    pub scale: f64,
    pub offset: f64,
    pub shift: f64,
}

impl Default for OverlapLossParams {
    fn default() -> Self {
        OverlapLossParams { scale: 24.0, offset: 0.25, shift: 12.0 }
    }
}

/// `sigmoid(s·(|pred − truth| + a) − b)`.
pub fn loss_overlap(pred: f64, truth: f64, p: &OverlapLossParams) -> f64 {
    logistic(p.scale * ((pred - truth).abs() + p.offset) - p.shift)
}

/// Derivative of [`loss_overlap`] with respect to `pred` (zero at `pred == truth`).
pub fn loss_overlap_grad(pred: f64, truth: f64, p: &OverlapLossParams) -> f64 {
    let diff = pred - truth;
    if diff == 0.0 {
        return 0.0;
    }
    let sig = logistic(p.scale * (diff.abs() + p.offset) - p.shift);
    sig * (1.0 - sig) * p.scale * diff.signum()
}

/// `log(1 + exp(z))` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy summed over all entries, with a one-hot target at
/// `truth_index` and `logistic(logit)` as the predicted probability.
pub fn loss_yaw(logits: &[f64], truth_index: usize) -> f64 {
    assert!(truth_index < logits.len(), "yaw label {truth_index} outside {} bins", logits.len());
    logits
        .iter()
        .enumerate()
        .map(|(i, &z)| if i == truth_index { softplus(-z) } else { softplus(z) })
        .sum()
}

/// Gradient of [`loss_yaw`] with respect to each logit: `logistic(z) − target`.
pub fn loss_yaw_grad(logits: &[f64], truth_index: usize) -> Vec<f64> {
    logits
        .iter()
        .enumerate()
        .map(|(i, &z)| logistic(z) - if i == truth_index { 1.0 } else { 0.0 })
        .collect()
}

/// `L_O + α·L_Y`, the yaw term dropped when no yaw label exists.
pub fn loss_combined(overlap_loss: f64, yaw_loss: Option<f64>, alpha: f64) -> f64 {
    overlap_loss + yaw_loss.map_or(0.0, |l| alpha * l)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sigmoid_by_hand(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    #[test]
    fn overlap_loss_reference_points() {
        let p = OverlapLossParams::default();
        // 24·(0 + 0.25) − 12 = −6
        assert!((loss_overlap(0.4, 0.4, &p) - sigmoid_by_hand(-6.0)).abs() < 1e-15);
        assert!((loss_overlap(0.4, 0.4, &p) - 0.002473).abs() < 1e-6);
        // 24·(1 + 0.25) − 12 = 18
        assert!((loss_overlap(1.0, 0.0, &p) - 1.0).abs() < 1e-4);
        // 24·(0.25 + 0.25) − 12 = 0
        assert!((loss_overlap(0.75, 0.5, &p) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn overlap_loss_is_monotone_in_error() {
        let p = OverlapLossParams::default();
        let mut last = 0.0;
        for i in 0..=1000 {
            let e = i as f64 / 1000.0;
            let l = loss_overlap(e, 0.0, &p);
            assert!(l >= last);
            last = l;
        }
    }

    #[test]
    fn yaw_loss_closed_forms() {
        let uniform = vec![0.0; 360];
        assert!((loss_yaw(&uniform, 17) - 360.0 * 2f64.ln()).abs() < 1e-9);
        let mut perfect = vec![-50.0; 360];
        perfect[17] = 50.0;
        assert!(loss_yaw(&perfect, 17) < 1e-18);
    }

    #[test]
    fn yaw_loss_prefers_raising_the_true_bin() {
        let base = vec![0.3; 360];
        let l0 = loss_yaw(&base, 42);
        for i in [0usize, 41, 42, 43, 359] {
            let mut up = base.clone();
            up[i] += 0.5;
            let l = loss_yaw(&up, 42);
            if i == 42 {
                assert!(l < l0);
            } else {
                assert!(l > l0);
            }
        }
    }

    #[test]
    fn combined_loss_cases() {
        assert!((loss_combined(0.1, Some(0.2), 5.0) - 1.1).abs() < 1e-15);
        assert_eq!(loss_combined(0.1, None, 5.0), 0.1);
        assert_eq!(loss_combined(0.1, Some(0.2), 0.0), 0.1);
    }
}
