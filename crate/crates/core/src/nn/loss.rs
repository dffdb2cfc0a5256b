use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax − onehot) / N`. Computed in `f64` with max-subtraction.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let &[n, classes] = logits.shape() else {
        return Err(Error::InvalidShape {
            shape: logits.shape().to_vec(),
            reason: "logits must be [N, C]".into(),
        });
    };
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }

    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * classes);
    let mut exps = vec![0.0; classes];
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let mut sum = 0.0;
        for (e, v) in exps.iter_mut().zip(row) {
            *e = (v.as_f64() - max).exp();
            sum += *e;
        }
        loss += sum.ln() - (row[label].as_f64() - max);
        for (c, e) in exps.iter().enumerate() {
            let onehot = if c == label { 1.0 } else { 0.0 };
            grad.push(T::of((e / sum - onehot) / n as f64));
        }
    }
    Ok((
        loss / n as f64,
        Tensor::from_parts(logits.shape().to_vec(), grad),
    ))
}

/// Number of rows whose first maximal logit sits at the label.
pub fn correct_predictions<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let classes = logits.shape().last().copied().unwrap_or(1);
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best == label
        })
        .count()
}
