use super::DenseMatrix;
use crate::error::{dim_err, PkmError, Result};

/// Max-subtracted softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let mut out = scores.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Mean cross-entropy over the batch and its gradient with respect to the
/// logits, `(softmax - onehot) / batch`.
pub fn cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> Result<(f64, DenseMatrix)> {
    if logits.rows() != labels.len() {
        return dim_err(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        ));
    }
    let classes = logits.cols();
    let n = logits.rows() as f64;
    let mut grad = DenseMatrix::zeros(logits.rows(), classes);
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(PkmError::Config(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += log_sum - row[label];
        let g = grad.row_mut(r);
        for (j, v) in row.iter().enumerate() {
            g[j] = (v - log_sum).exp() / n;
        }
        g[label] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Rng};

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.7, 0.7]), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
    }

    #[test]
    fn softmax_sums_to_one_and_is_permutation_equivariant() {
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            let n = 1 + rng.below(20);
            let s: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 10.0)).collect();
            let p = softmax(&s);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|v| *v > 0.0 || s.iter().cloned().fold(f64::MIN, f64::max) - 700.0 > 0.0));
            let rev: Vec<f64> = s.iter().rev().copied().collect();
            let pr = softmax(&rev);
            for (a, b) in p.iter().zip(pr.iter().rev()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = DenseMatrix::zeros(3, 10);
        let (loss, _) = cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);

        let mut confident = DenseMatrix::zeros(1, 10);
        confident.set(0, 3, 100.0);
        let (loss, _) = cross_entropy(&confident, &[3]).unwrap();
        assert!(loss < 1e-40);

        assert!(cross_entropy(&logits, &[0, 1, 10]).is_err());
        assert!(cross_entropy(&logits, &[0]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = Rng::new(9);
        for _ in 0..100 {
            let (n, m) = (1 + rng.below(4), 2 + rng.below(6));
            let logits = DenseMatrix::from_vec(n, m, (0..n * m).map(|_| rng.normal(0.0, 2.0)).collect()).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.below(m)).collect();
            let (_, grad) = cross_entropy(&logits, &labels).unwrap();
            let report = grad_check(
                |p| cross_entropy(&DenseMatrix::from_vec(n, m, p.to_vec()).unwrap(), &labels).unwrap().0,
                logits.as_slice(),
                grad.as_slice(),
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
        }
    }
}
