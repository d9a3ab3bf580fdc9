use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Mean softmax cross-entropy over the batch, with the gradient w.r.t. the
/// logits. `logits` is `(n, K, 1, 1)` (any trailing dims are flattened).
pub fn cross_entropy_loss<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    let k = s.sample_len();
    if labels.len() != s.n {
        return Err(Error::dim(
            "cross_entropy",
            format!("{} labels for batch of {}", labels.len(), s.n),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    let m = T::of_usize(s.n.max(1));
    let mut grad = Tensor::zeros(s);
    let mut total = T::zero();
    for (n, &label) in labels.iter().enumerate() {
        let z = logits.sample(n);
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = z.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        total = total + (log_sum - (z[label] - max));
        let g = &mut grad.data_mut()[n * k..(n + 1) * k];
        for (j, gv) in g.iter_mut().enumerate() {
            let p = (z[j] - max - log_sum).exp();
            let onehot = if j == label { T::one() } else { T::zero() };
            *gv = (p - onehot) / m;
        }
    }
    Ok((total / m, grad))
}

/// Mean squared error over all elements with gradients for both operands.
pub fn mse_loss<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<(T, Tensor<T>, Tensor<T>)> {
    if x.shape() != y.shape() {
        return Err(Error::dim("mse", format!("{} vs {}", x.shape(), y.shape())));
    }
    let count = T::of_usize(x.len().max(1));
    let two = T::of_f64(2.0);
    let mut gx = Tensor::zeros(x.shape());
    let mut total = T::zero();
    for ((g, &a), &b) in gx.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
        let d = a - b;
        total = total + d * d;
        *g = two * d / count;
    }
    let gy = gx.map(|v| -v);
    Ok((total / count, gx, gy))
}

/// Top-1 predictions.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let s = logits.shape();
    (0..s.n)
        .map(|n| {
            let z = logits.sample(n);
            let mut best = 0;
            for (j, &v) in z.iter().enumerate() {
                if v > z[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
