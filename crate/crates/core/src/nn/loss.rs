use super::net::softmax_in_place;
use super::{NnError, Scalar, Tensor};

/// Mean softmax cross-entropy over a batch of logits, and its gradient.
pub fn cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>), NnError> {
    if logits.shape().rank() != 2 {
        return Err(NnError::InvalidShape(logits.shape().dims().to_vec()));
    }
    let (batch, classes) = (logits.batch(), logits.row_len());
    if labels.len() != batch {
        return Err(NnError::LengthMismatch { what: "labels", expected: batch, actual: labels.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(NnError::LabelOutOfRange { label: bad, classes });
    }
    let inv_n = T::one() / T::of(batch as f64);
    let mut grad = logits.data().to_vec();
    let mut loss = 0.0f64;
    for (row, &y) in grad.chunks_exact_mut(classes).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        loss += (log_sum - row[y]).as_f64();
        softmax_in_place(row);
        row[y] -= T::one();
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }
    Ok((T::of(loss / batch as f64), Tensor::from_parts(logits.shape().clone(), grad)))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
