use crate::error::{Error, Result};

use super::model::sigmoid;
use super::{Real, Tensor};

/// Probabilities are clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]` before logs.
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    /// Class-weighted binary cross-entropy on sigmoid outputs.
    Bce { class_weights: Vec<f64> },
    /// Class-weighted categorical cross-entropy on softmax outputs.
    CrossEntropy { class_weights: Vec<f64> },
    /// `sum(logits * targets)`; linear in the logits, for testing.
    LogitProbe,
}

impl LossKind {
    pub fn bce(n_classes: usize) -> Self {
        LossKind::Bce {
            class_weights: vec![1.0; n_classes],
        }
    }

    pub fn cross_entropy(n_classes: usize) -> Self {
        LossKind::CrossEntropy {
            class_weights: vec![1.0; n_classes],
        }
    }
}

fn check<T: Real>(a: &Tensor<T>, b: &Tensor<T>, weights: &[f64]) -> Result<(usize, usize)> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    let (n, k) = (a.shape()[0], a.shape()[1]);
    if weights.len() != k {
        return Err(Error::ShapeMismatch {
            expected: vec![k],
            actual: vec![weights.len()],
        });
    }
    Ok((n, k))
}

/// Mean over batch and classes of `w_c * -(t ln y + (1 - t) ln(1 - y))`,
/// with the gradient with respect to `probs`.
pub fn bce_loss<T: Real>(probs: &Tensor<T>, targets: &Tensor<T>, class_weights: &[f64]) -> Result<(f64, Tensor<T>)> {
    let (n, k) = check(probs, targets, class_weights)?;
    let scale = 1.0 / (n * k).max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (i, (&p, &t)) in probs.data().iter().zip(targets.data()).enumerate() {
        let w = class_weights[i % k];
        let y = p.as_f64().clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        let t = t.as_f64();
        loss += w * -(t * y.ln() + (1.0 - t) * (1.0 - y).ln());
        grad.push(T::of_f64(w * scale * ((1.0 - t) / (1.0 - y) - t / y)));
    }
    Ok((loss * scale, Tensor::new(probs.shape().to_vec(), grad)?))
}

/// Same loss as [`bce_loss`] evaluated from logits, with the gradient with
/// respect to the logits. Avoids the vanishing `p (1 - p)` factor of a
/// saturated sigmoid.
pub fn bce_loss_with_logits<T: Real>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    class_weights: &[f64],
) -> Result<(f64, Tensor<T>)> {
    let (n, k) = check(logits, targets, class_weights)?;
    let scale = 1.0 / (n * k).max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (i, (&z, &t)) in logits.data().iter().zip(targets.data()).enumerate() {
        let w = class_weights[i % k];
        let p = sigmoid(z.as_f64());
        let y = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        let t = t.as_f64();
        loss += w * -(t * y.ln() + (1.0 - t) * (1.0 - y).ln());
        grad.push(T::of_f64(w * scale * (p - t)));
    }
    Ok((loss * scale, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Batch mean of `-w_c ln p_c` for the target class(es) of each row.
pub fn cross_entropy_loss<T: Real>(
    probs: &Tensor<T>,
    targets: &Tensor<T>,
    class_weights: &[f64],
) -> Result<(f64, Tensor<T>)> {
    let (n, k) = check(probs, targets, class_weights)?;
    let scale = 1.0 / n.max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (i, (&p, &t)) in probs.data().iter().zip(targets.data()).enumerate() {
        let w = class_weights[i % k];
        let y = p.as_f64().clamp(BCE_EPSILON, 1.0);
        let t = t.as_f64();
        loss -= w * t * y.ln();
        grad.push(T::of_f64(-w * scale * t / y));
    }
    Ok((loss * scale, Tensor::new(probs.shape().to_vec(), grad)?))
}

/// Cross-entropy from logits with the gradient with respect to the logits.
pub fn cross_entropy_with_logits<T: Real>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    class_weights: &[f64],
) -> Result<(f64, Tensor<T>)> {
    let (n, k) = check(logits, targets, class_weights)?;
    let scale = 1.0 / n.max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (z, t) in logits.data().chunks(k).zip(targets.data().chunks(k)) {
        let m = z.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
        let lse = m + z.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
        let tw: Vec<f64> = t.iter().zip(class_weights).map(|(t, w)| t.as_f64() * w).collect();
        let tw_sum: f64 = tw.iter().sum();
        for (c, &zc) in z.iter().enumerate() {
            let logp = zc.as_f64() - lse;
            loss -= tw[c] * logp.max(BCE_EPSILON.ln());
            grad.push(T::of_f64(scale * (tw_sum * logp.exp() - tw[c])));
        }
    }
    Ok((loss * scale, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Binary label matrix: `probs > threshold` (strict).
pub fn predict_multilabel<T: Real>(probs: &Tensor<T>, threshold: f64) -> Vec<Vec<bool>> {
    let k = probs.row_len().max(1);
    probs
        .data()
        .chunks(k)
        .map(|row| row.iter().map(|p| p.as_f64() > threshold).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn half_probability_gives_ln2() {
        let (l, _) = bce_loss(&t(vec![1, 1], &[0.5]), &t(vec![1, 1], &[1.0]), &[1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_is_small() {
        let p = t(vec![1, 4], &[1.0, 0.0, 1.0 - 1e-9, 1e-12]);
        let y = t(vec![1, 4], &[1.0, 0.0, 1.0, 0.0]);
        let (l, _) = bce_loss(&p, &y, &[1.0; 4]).unwrap();
        assert!(l <= 1.2e-7, "{l}");
    }

    #[test]
    fn zero_weights_zero_loss() {
        let p = t(vec![2, 2], &[0.1, 0.7, 0.4, 0.9]);
        let y = t(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let (l, g) = bce_loss(&p, &y, &[0.0, 0.0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logit_form_matches_prob_form() {
        let z = [-2.0, 0.3, 1.7, -0.4, 0.0, 3.0];
        let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let y = t(vec![2, 3], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let w = [0.5, 1.0, 2.0];
        let (a, ga) = bce_loss(&t(vec![2, 3], &p), &y, &w).unwrap();
        let (b, gb) = bce_loss_with_logits(&t(vec![2, 3], &z), &y, &w).unwrap();
        assert!((a - b).abs() < 1e-12);
        for ((g, q), h) in ga.data().iter().zip(&p).zip(gb.data()) {
            let chain = g * q * (1.0 - q);
            assert!((chain - h).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let p = t(vec![1, 2], &[0.5, 0.5]);
        let y = t(vec![2, 1], &[1.0, 0.0]);
        assert!(bce_loss(&p, &y, &[1.0, 1.0]).is_err());
        assert!(bce_loss(&p, &p, &[1.0]).is_err());
    }

    #[test]
    fn strict_threshold() {
        let p = t(vec![1, 3], &[0.61, 0.59, 0.6]);
        assert_eq!(predict_multilabel(&p, 0.6), vec![vec![true, false, false]]);
        assert_eq!(predict_multilabel(&p, 0.0), vec![vec![true, true, true]]);
    }

    #[test]
    fn softmax_ce_logit_form() {
        let z = [0.2, -1.0, 2.0];
        let m = 2.0f64;
        let s: f64 = z.iter().map(|v: &f64| (v - m).exp()).sum();
        let p: Vec<f64> = z.iter().map(|v| (v - m).exp() / s).collect();
        let y = t(vec![1, 3], &[0.0, 1.0, 0.0]);
        let (a, _) = cross_entropy_loss(&t(vec![1, 3], &p), &y, &[1.0; 3]).unwrap();
        let (b, g) = cross_entropy_with_logits(&t(vec![1, 3], &z), &y, &[1.0; 3]).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!((g.data()[1] - (p[1] - 1.0)).abs() < 1e-12);
    }
}
