use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax − onehot) / batch`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len()]));
    }
    let (n, classes) = (logits.dim(0), logits.dim(1));
    let inv_n = T::of(1.0 / n as f64);
    let mut grad = vec![T::zero(); n * classes];
    let mut loss = T::zero();
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Label { label, classes });
        }
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum = row.iter().fold(T::zero(), |acc, &z| acc + (z - max).exp());
        let log_sum = sum.ln();
        loss += -(row[label] - max - log_sum);
        let g = &mut grad[b * classes..(b + 1) * classes];
        for (c, gv) in g.iter_mut().enumerate() {
            let softmax = (row[c] - max - log_sum).exp();
            let onehot = if c == label { T::one() } else { T::zero() };
            *gv = (softmax - onehot) * inv_n;
        }
    }
    Ok((loss * inv_n, Tensor::new(logits.shape(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::<f64>::zeros(&[3, 7]);
        let (loss, _) = cross_entropy(&logits, &[0, 3, 6]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_logit() {
        let logits = Tensor::new(&[1, 3], vec![1000.0f64, 0.0, 0.0]).unwrap();
        let (loss, g) = cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn hand_batch_of_two() {
        let logits = Tensor::new(&[2, 2], vec![1.0f64, 2.0, 0.0, 0.0]).unwrap();
        let (loss, g) = cross_entropy(&logits, &[1, 0]).unwrap();
        let p1 = 2f64.exp() / (1f64.exp() + 2f64.exp());
        let expected = (-(p1.ln()) + 2f64.ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-14);
        assert!((g.data()[0] - (1.0 - p1) / 2.0).abs() < 1e-14);
        assert!((g.data()[1] - (p1 - 1.0) / 2.0).abs() < 1e-14);
        assert!((g.data()[2] - (-0.25)).abs() < 1e-14);
        assert!((g.data()[3] - 0.25).abs() < 1e-14);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::<f32>::zeros(&[1, 3]);
        assert!(matches!(cross_entropy(&logits, &[3]), Err(Error::Label { .. })));
    }
}
