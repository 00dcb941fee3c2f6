use crate::error::{Error, Result};
use crate::matrix::{softmax, Matrix};

/// Mean softmax cross-entropy and its gradient `(softmax − onehot)/n`.
pub fn cross_entropy_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let k = logits.cols();
    if k < 2 {
        return Err(Error::invalid("cross-entropy needs at least two classes"));
    }
    if labels.len() != logits.rows() {
        return Err(Error::DimensionMismatch {
            stage: "loss labels",
            expected: logits.rows(),
            found: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let n = logits.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), k);
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
        loss += log_sum - row[label];
        let p = softmax(row);
        let g = grad.row_mut(r);
        for j in 0..k {
            g[j] = (p[j] - if j == label { 1.0 } else { 0.0 }) / n;
        }
    }
    // rounding can leave a tiny negative mean; NaN must pass through
    let loss = loss / n;
    Ok((if loss < 0.0 { 0.0 } else { loss }, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Matrix::from_vec(2, 4, vec![0.3; 8]).unwrap();
        let (loss, _) = cross_entropy_loss(&logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logits_have_vanishing_loss() {
        let logits = Matrix::from_vec(1, 3, vec![50.0, 0.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy_loss(&logits, &[0]).unwrap();
        assert!((0.0..1e-9).contains(&loss));
    }

    #[test]
    fn single_class_is_rejected() {
        let logits = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        assert!(cross_entropy_loss(&logits, &[0]).is_err());
        let logits = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(cross_entropy_loss(&logits, &[2]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let data: Vec<f64> = (0..15).map(|_| rng.random_range(-3.0..3.0)).collect();
        let logits = Matrix::from_vec(3, 5, data).unwrap();
        let labels = [4, 0, 2];
        let (_, grad) = cross_entropy_loss(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..15 {
            let mut plus = logits.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = logits.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (cross_entropy_loss(&plus, &labels).unwrap().0
                - cross_entropy_loss(&minus, &labels).unwrap().0)
                / (2.0 * h);
            let a = grad.as_slice()[i];
            assert!((a - fd).abs() / a.abs().max(fd.abs()) < 1e-5, "entry {i}: {a} vs {fd}");
        }
    }
}
