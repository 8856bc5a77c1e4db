use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-wise softmax of `[N, C]` logits, max-subtracted.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    logits.expect_rank("softmax", 2)?;
    let c = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z = exps.iter().fold(T::zero(), |a, &e| a + e);
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::from_vec(logits.shape().to_vec(), out)
}

/// Mean cross-entropy over the batch and its gradient `(softmax − onehot)/N`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    logits.expect_rank("softmax_cross_entropy", 2)?;
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {c} categories"
        )));
    }
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(n * c);
    for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
        let log_z = z.ln();
        total = total + (log_z - (row[label] - m));
        for (j, &v) in row.iter().enumerate() {
            let p = (v - m).exp() / z;
            let onehot = if j == label { T::one() } else { T::zero() };
            grad.push((p - onehot) * inv_n);
        }
    }
    Ok((total * inv_n, Tensor::from_vec(vec![n, c], grad)?))
}
