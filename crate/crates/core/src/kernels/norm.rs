use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Normalize by batch statistics.
    Train,
    /// Normalize by running statistics.
    Eval,
}

/// Borrowed batch-norm state for one layer.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams<'a, T> {
    pub gamma: &'a [T],
    pub beta: &'a [T],
    pub running_mean: &'a [T],
    pub running_var: &'a [T],
    pub epsilon: T,
}

/// What the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub mode: BnMode,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Biased batch variance (Train mode only).
    pub batch_var: Vec<T>,
}

pub fn batchnorm_forward<T: Element>(
    input: &Tensor<T>,
    params: &BatchNormParams<'_, T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let s = input.shape();
    let c = s.c;
    for (name, len) in [
        ("gamma", params.gamma.len()),
        ("beta", params.beta.len()),
        ("running_mean", params.running_mean.len()),
        ("running_var", params.running_var.len()),
    ] {
        if len != c {
            return Err(Error::dim(
                "batchnorm",
                format!("{name} has {len} entries for {c} channels"),
            ));
        }
    }
    let plane = s.plane();
    let count = s.n * plane;
    let (mean, var) = match mode {
        BnMode::Train => {
            if count == 0 {
                return Err(Error::dim("batchnorm", "empty batch in train mode"));
            }
            let m = T::of_usize(count);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = T::zero();
                for n in 0..s.n {
                    let base = (n * c + ch) * plane;
                    acc = acc + input.data()[base..base + plane].iter().copied().sum();
                }
                mean[ch] = acc / m;
                let mut sq = T::zero();
                for n in 0..s.n {
                    let base = (n * c + ch) * plane;
                    for &x in &input.data()[base..base + plane] {
                        let d = x - mean[ch];
                        sq = sq + d * d;
                    }
                }
                var[ch] = sq / m;
            }
            (mean, var)
        }
        BnMode::Eval => (params.running_mean.to_vec(), params.running_var.to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + params.epsilon).sqrt()).collect();
    let mut xhat = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for ch in 0..c {
            let base = (n * c + ch) * plane;
            let (mu, is, g, b) = (mean[ch], inv_std[ch], params.gamma[ch], params.beta[ch]);
            for k in base..base + plane {
                let xh = (input.data()[k] - mu) * is;
                xhat.data_mut()[k] = xh;
                out.data_mut()[k] = g * xh + b;
            }
        }
    }
    let batch_var = if mode == BnMode::Train { var } else { Vec::new() };
    Ok((
        out,
        BnCache {
            mode,
            xhat,
            inv_std,
            batch_mean: if mode == BnMode::Train { mean } else { Vec::new() },
            batch_var,
        },
    ))
}

/// Exponential moving update of running statistics from a Train-mode cache.
/// The running variance tracks the unbiased batch variance.
pub fn update_running_stats<T: Element>(
    running_mean: &mut [T],
    running_var: &mut [T],
    cache: &BnCache<T>,
    batch_count: usize,
    momentum: T,
) {
    if cache.mode != BnMode::Train {
        return;
    }
    let correction = if batch_count > 1 {
        T::of_usize(batch_count) / T::of_usize(batch_count - 1)
    } else {
        T::one()
    };
    let keep = T::one() - momentum;
    for ch in 0..running_mean.len() {
        running_mean[ch] = keep * running_mean[ch] + momentum * cache.batch_mean[ch];
        running_var[ch] = keep * running_var[ch] + momentum * cache.batch_var[ch] * correction;
    }
}

pub struct BnGrads<T> {
    pub input: Option<Tensor<T>>,
    pub gamma: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
}

pub fn batchnorm_backward<T: Element>(
    grad_out: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    need_input: bool,
    need_params: bool,
) -> Result<BnGrads<T>> {
    let s = grad_out.shape();
    if s != cache.xhat.shape() {
        return Err(Error::dim(
            "batchnorm backward",
            format!("grad {s} vs cached {}", cache.xhat.shape()),
        ));
    }
    let c = s.c;
    let plane = s.plane();
    let g = grad_out.data();
    let xh = cache.xhat.data();
    // Per-channel sums of dy and dy * xhat; both directions need them.
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for n in 0..s.n {
        for ch in 0..c {
            let base = (n * c + ch) * plane;
            let mut a = T::zero();
            let mut b = T::zero();
            for k in base..base + plane {
                a = a + g[k];
                b = b + g[k] * xh[k];
            }
            sum_g[ch] = sum_g[ch] + a;
            sum_gx[ch] = sum_gx[ch] + b;
        }
    }
    let input = need_input.then(|| {
        let mut gin = Tensor::zeros(s);
        let m = T::of_usize(s.n * plane);
        for n in 0..s.n {
            for ch in 0..c {
                let base = (n * c + ch) * plane;
                let scale = gamma[ch] * cache.inv_std[ch];
                let dst = &mut gin.data_mut()[base..base + plane];
                match cache.mode {
                    BnMode::Eval => {
                        for (d, &gv) in dst.iter_mut().zip(&g[base..base + plane]) {
                            *d = scale * gv;
                        }
                    }
                    BnMode::Train => {
                        let (mg, mgx) = (sum_g[ch] / m, sum_gx[ch] / m);
                        for (k, d) in dst.iter_mut().enumerate() {
                            let idx = base + k;
                            *d = scale * (g[idx] - mg - xh[idx] * mgx);
                        }
                    }
                }
            }
        }
        gin
    });
    Ok(BnGrads {
        input,
        gamma: need_params.then(|| Tensor::vector(sum_gx)),
        beta: need_params.then(|| Tensor::vector(sum_g)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn params<'a>(g: &'a [f64], b: &'a [f64], m: &'a [f64], v: &'a [f64]) -> BatchNormParams<'a, f64> {
        BatchNormParams {
            gamma: g,
            beta: b,
            running_mean: m,
            running_var: v,
            epsilon: BN_EPSILON,
        }
    }

    #[test]
    fn eval_identity_normalization() {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 2, 3, 3), |i| i as f64 * 0.1 - 1.0);
        let (one, zero) = ([1.0, 1.0], [0.0, 0.0]);
        let (y, _) = batchnorm_forward(&x, &params(&one, &zero, &zero, &one), BnMode::Eval).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn eval_affine_value() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 3.0);
        let (y, _) = batchnorm_forward(&x, &params(&[2.0], &[1.0], &[0.0], &[1.0]), BnMode::Eval).unwrap();
        let expected = 2.0 * 3.0 / (1.0f64 + 1e-5).sqrt() + 1.0;
        assert!((y.data()[0] - expected).abs() < 1e-12);
        assert!((y.data()[0] - 7.0).abs() < 1e-4);
    }

    #[test]
    fn train_mode_moments_match_affine() {
        let x = Tensor::<f64>::from_fn(Shape::new(4, 3, 2, 2), |i| ((i * 7919) % 97) as f64 / 9.0);
        let (g, b) = ([1.5, 0.5, 2.0], [0.3, -1.0, 0.0]);
        let z = [0.0; 3];
        let o = [1.0; 3];
        let (y, _) = batchnorm_forward(&x, &params(&g, &b, &z, &o), BnMode::Train).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..4).map(move |k| (n, k)))
                .map(|(n, k)| y.at(n, ch, k / 2, k % 2))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((mean - b[ch]).abs() < 1e-4);
            assert!((var - g[ch] * g[ch]).abs() < 1e-4 * g[ch] * g[ch] + 1e-3);
        }
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let x = Tensor::<f64>::from_vec(Shape::new(2, 1, 1, 1), vec![1.0, 3.0]).unwrap();
        let (_, cache) = batchnorm_forward(&x, &params(&[1.0], &[0.0], &[0.0], &[1.0]), BnMode::Train).unwrap();
        let (mut rm, mut rv) = ([0.0], [1.0]);
        update_running_stats(&mut rm, &mut rv, &cache, 2, BN_MOMENTUM);
        assert!((rm[0] - 0.2).abs() < 1e-12);
        // unbiased variance of {1, 3} is 2
        assert!((rv[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_errors() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 1, 1));
        let r = batchnorm_forward(&x, &params(&[1.0], &[0.0], &[0.0], &[1.0]), BnMode::Eval);
        assert!(r.is_err());
    }
}
