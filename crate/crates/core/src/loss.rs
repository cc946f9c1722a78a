//! Classification and box-regression losses.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sentinel label for rows excluded from the classification loss.
pub const IGNORE_LABEL: i32 = -1;

/// Mean negative log-softmax of the true class over non-ignored rows.
///
/// Logits are (rows, classes). Rows labeled [`IGNORE_LABEL`] contribute
/// neither loss nor gradient; if every row is ignored the loss is 0 with a
/// zero gradient. Max-subtraction keeps extreme logits finite.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[i32]) -> Result<(f64, Tensor)> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("logits must be 2-order, got {shape:?}"),
        ));
    }
    let (rows, classes) = (shape[0], shape[1]);
    if labels.len() != rows {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for {rows} rows", labels.len()),
        ));
    }
    for &label in labels {
        if label != IGNORE_LABEL && !(0..classes as i32).contains(&label) {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("label {label} outside [0, {classes})"),
            ));
        }
    }

    let count = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    let mut grad = Tensor::zeros(shape);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv_count = 1.0 / count as f64;

    let mut loss = 0.0f64;
    let x = logits.data();
    for r in 0..rows {
        let label = labels[r];
        if label == IGNORE_LABEL {
            continue;
        }
        let row = &x[r * classes..][..classes];
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let mut denom = 0.0f64;
        for &v in row {
            denom += (v as f64 - max).exp();
        }
        let log_denom = denom.ln();
        let true_logit = row[label as usize] as f64 - max;
        loss += log_denom - true_logit;

        let grow = &mut grad.data_mut()[r * classes..][..classes];
        for (c, g) in grow.iter_mut().enumerate() {
            let p = (row[c] as f64 - max).exp() / denom;
            let onehot = if c == label as usize { 1.0 } else { 0.0 };
            *g = ((p - onehot) * inv_count) as f32;
        }
    }
    Ok((loss * inv_count, grad))
}

/// Weighted smooth-L1: sum of w * f(p - t) with f(d) = 0.5 d^2 for |d| < 1,
/// |d| - 0.5 otherwise, normalized by the count of rows (first-axis entries)
/// carrying any nonzero weight.
pub fn smooth_l1(pred: &Tensor, target: &Tensor, weights: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() || pred.shape() != weights.shape() {
        return Err(Error::shape(
            "smooth_l1",
            format!(
                "pred {:?}, target {:?}, weights {:?} must all match",
                pred.shape(),
                target.shape(),
                weights.shape()
            ),
        ));
    }
    let rows = pred.shape()[0];
    let row_len = pred.numel() / rows;
    let mut weighted_rows = 0usize;
    for r in 0..rows {
        let wrow = &weights.data()[r * row_len..][..row_len];
        if wrow.iter().any(|&w| w != 0.0) {
            weighted_rows += 1;
        }
    }
    let denom = weighted_rows.max(1) as f64;

    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(pred.shape());
    for i in 0..pred.numel() {
        let w = weights.data()[i] as f64;
        if w == 0.0 {
            continue;
        }
        let d = pred.data()[i] as f64 - target.data()[i] as f64;
        let (f, df) = if d.abs() < 1.0 {
            (0.5 * d * d, d)
        } else {
            (d.abs() - 0.5, d.signum())
        };
        loss += w * f;
        grad.data_mut()[i] = (w * df / denom) as f32;
    }
    Ok((loss / denom, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_ln_num_classes() {
        let logits = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((grad.data()[0] - (-0.5)).abs() < 1e-6);
        assert!((grad.data()[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let logits = Tensor::new(&[1, 2], vec![1000.0, -1000.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.is_finite());
        assert!(loss.abs() < 1e-6);
        assert!(grad.is_finite());
    }

    #[test]
    fn three_class_hand_value() {
        let logits = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        // -ln(e^3 / (e + e^2 + e^3))
        let want = -((3.0f64).exp() / ((1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp())).ln();
        assert!((loss - want).abs() < 1e-12);
        assert!((loss - 0.40761).abs() < 1e-5);
    }

    #[test]
    fn all_rows_ignored_is_zero_loss_zero_grad() {
        let logits = Tensor::new(&[2, 2], vec![1.0, -1.0, 0.5, 0.5]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[IGNORE_LABEL, IGNORE_LABEL]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_never_negative() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let logits = Tensor::uniform(&[3, 4], -4.0, 4.0, &mut rng);
            let labels = [0, 2, 3];
            let (loss, _) = softmax_cross_entropy(&logits, &labels).unwrap();
            assert!(loss >= 0.0, "cross entropy went negative: {loss}");
        }
    }

    #[test]
    fn rejects_out_of_range_label() {
        let logits = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert!(softmax_cross_entropy(&logits, &[2]).is_err());
        assert!(softmax_cross_entropy(&logits, &[-7]).is_err());
    }

    #[test]
    fn smooth_l1_zero_at_equality() {
        let p = Tensor::new(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let w = Tensor::full(&[2, 2], 1.0);
        let (loss, grad) = smooth_l1(&p, &p, &w).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn smooth_l1_quadratic_branch() {
        let p = Tensor::new(&[1], vec![0.5]).unwrap();
        let t = Tensor::new(&[1], vec![0.0]).unwrap();
        let w = Tensor::new(&[1], vec![1.0]).unwrap();
        let (loss, grad) = smooth_l1(&p, &t, &w).unwrap();
        assert!((loss - 0.125).abs() < 1e-9);
        assert!((grad.data()[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn smooth_l1_linear_branch() {
        let p = Tensor::new(&[1], vec![2.0]).unwrap();
        let t = Tensor::new(&[1], vec![0.0]).unwrap();
        let w = Tensor::new(&[1], vec![1.0]).unwrap();
        let (loss, grad) = smooth_l1(&p, &t, &w).unwrap();
        assert!((loss - 1.5).abs() < 1e-9);
        assert!((grad.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn smooth_l1_normalizes_by_weighted_rows() {
        // Two rows weighted, one ignored: denominator is 2.
        let p = Tensor::new(&[3, 1], vec![0.5, 2.0, 9.0]).unwrap();
        let t = Tensor::zeros(&[3, 1]);
        let w = Tensor::new(&[3, 1], vec![1.0, 1.0, 0.0]).unwrap();
        let (loss, _) = smooth_l1(&p, &t, &w).unwrap();
        assert!((loss - (0.125 + 1.5) / 2.0).abs() < 1e-9);
    }
}
