//! Batch normalization over `[N, C]` or `[N, C, H, W]` inputs.

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight kept by the running statistics at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug)]
pub struct BatchNormCache<T: Scalar> {
    pub(crate) xhat: Tensor<T>,
    inv_std: Vec<f64>,
    mode: Mode,
    /// Batch mean and unbiased batch variance (training mode only).
    batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

/// `(N, C, L)` view where `L` is the product of the spatial extents.
fn layout(shape: &[usize], channels: usize) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c, rest @ ..] if *c == channels && (rest.is_empty() || rest.len() == 2) => {
            Ok((*n, *c, rest.iter().product()))
        }
        _ => Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("batch norm expects [N, {channels}] or [N, {channels}, H, W]"),
        }),
    }
}

pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, l) = layout(x.shape(), gamma.numel())?;
    let at = |i: usize, ch: usize, j: usize| (i * c + ch) * l + j;
    let xs = x.data();

    let (mean, var, batch_stats) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::SingleSampleBatch {
                    path: String::new(),
                });
            }
            let m = (n * l) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..l {
                        s += xs[at(i, ch, j)].as_f64();
                    }
                }
                let mu = s / m;
                let mut ss = 0.0;
                for i in 0..n {
                    for j in 0..l {
                        let d = xs[at(i, ch, j)].as_f64() - mu;
                        ss += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = ss / m;
            }
            let unbiased = var.iter().map(|v| v * m / (m - 1.0)).collect();
            (mean.clone(), var, Some((mean, unbiased)))
        }
        Mode::Eval => (
            running_mean.to_f64_vec(),
            running_var.to_f64_vec(),
            None,
        ),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for i in 0..n {
        for ch in 0..c {
            let (g, b) = (gamma.data()[ch].as_f64(), beta.data()[ch].as_f64());
            for j in 0..l {
                let k = at(i, ch, j);
                let h = (xs[k].as_f64() - mean[ch]) * inv_std[ch];
                xhat[k] = T::of(h);
                y[k] = T::of(g * h + b);
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), y),
        BatchNormCache {
            xhat: Tensor::from_parts(shape, xhat),
            inv_std,
            mode,
            batch_stats,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    grad_out.expect_same_shape(&cache.xhat)?;
    let (n, c, l) = layout(grad_out.shape(), gamma.numel())?;
    let at = |i: usize, ch: usize, j: usize| (i * c + ch) * l + j;
    let (dy, xhat) = (grad_out.data(), cache.xhat.data());
    let m = (n * l) as f64;

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); dy.len()];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..l {
                let k = at(i, ch, j);
                sum_dy += dy[k].as_f64();
                sum_dy_xhat += dy[k].as_f64() * xhat[k].as_f64();
            }
        }
        dgamma[ch] = T::of(sum_dy_xhat);
        dbeta[ch] = T::of(sum_dy);
        let scale = gamma.data()[ch].as_f64() * cache.inv_std[ch];
        for i in 0..n {
            for j in 0..l {
                let k = at(i, ch, j);
                dx[k] = T::of(match cache.mode {
                    Mode::Train => {
                        scale * (dy[k].as_f64() - sum_dy / m - xhat[k].as_f64() * sum_dy_xhat / m)
                    }
                    Mode::Eval => scale * dy[k].as_f64(),
                });
            }
        }
    }
    Ok((
        Tensor::from_parts(grad_out.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    ))
}

/// Running statistics after folding in this batch, or `None` in eval mode.
pub fn updated_running_stats<T: Scalar>(
    cache: &BatchNormCache<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Option<(Tensor<T>, Tensor<T>)> {
    let (mean, var) = cache.batch_stats.as_ref()?;
    let blend = |old: &Tensor<T>, new: &[f64]| {
        let data = old
            .data()
            .iter()
            .zip(new)
            .map(|(o, n)| T::of(BN_MOMENTUM * o.as_f64() + (1.0 - BN_MOMENTUM) * n))
            .collect();
        Tensor::from_parts(old.shape().to_vec(), data)
    };
    Some((blend(running_mean, mean), blend(running_var, var)))
}
