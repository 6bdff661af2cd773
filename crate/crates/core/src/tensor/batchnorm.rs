use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Saved state of a [`batchnorm3d_forward`] call.
#[derive(Clone, Debug)]
pub struct BatchNormCtx<T> {
    shape: Vec<usize>,
    normalized: Vec<T>,
    inv_std: Vec<f64>,
    gamma: Vec<T>,
    train: bool,
    batch_mean: Vec<f64>,
    batch_var_unbiased: Vec<f64>,
}

impl<T: Real> BatchNormCtx<T> {
    /// Running statistics after folding in this batch with [`BN_MOMENTUM`].
    /// Returns `None` for eval-mode contexts.
    pub fn updated_running(&self, mean: &[T], var: &[T]) -> Option<(Vec<T>, Vec<T>)> {
        if !self.train {
            return None;
        }
        let m = BN_MOMENTUM;
        let new_mean = mean
            .iter()
            .zip(&self.batch_mean)
            .map(|(&r, &b)| T::of((1.0 - m) * r.wide() + m * b))
            .collect();
        let new_var = var
            .iter()
            .zip(&self.batch_var_unbiased)
            .map(|(&r, &b)| T::of((1.0 - m) * r.wide() + m * b))
            .collect();
        Some((new_mean, new_var))
    }
}

fn channel_planes(dims: [usize; 5]) -> (usize, usize, usize) {
    let [n, c, d, h, w] = dims;
    (n, c, d * h * w)
}

/// Per-channel normalization over batch and spatial axes.
///
/// Train mode normalizes with the batch statistics; eval mode with the
/// supplied running statistics.
pub fn batchnorm3d_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    train: bool,
) -> Result<(Tensor<T>, BatchNormCtx<T>)> {
    let dims = x.dims5("batchnorm3d input")?;
    let (n, c, plane) = channel_planes(dims);
    for (t, what) in [
        (gamma, "gamma"),
        (beta, "beta"),
        (running_mean, "running mean"),
        (running_var, "running var"),
    ] {
        if t.len() != c {
            return Err(Error::dim(format!(
                "batchnorm3d {what} has {} entries, input has {c} channels",
                t.len()
            )));
        }
    }
    let count = n * plane;
    if train && count == 0 {
        return Err(Error::EmptyBatch);
    }
    let src = x.values();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    let mut var_unbiased = vec![0.0f64; c];
    if train {
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += src[(b * c + ch) * plane..][..plane].iter().map(|v| v.wide()).sum::<f64>();
            }
            let mu = s / count as f64;
            let mut q = 0.0;
            for b in 0..n {
                q += src[(b * c + ch) * plane..][..plane]
                    .iter()
                    .map(|v| {
                        let d = v.wide() - mu;
                        d * d
                    })
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = q / count as f64;
            var_unbiased[ch] = if count > 1 { q / (count - 1) as f64 } else { var[ch] };
        }
    } else {
        for ch in 0..c {
            mean[ch] = running_mean.values()[ch].wide();
            var[ch] = running_var.values()[ch].wide();
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut normalized = vec![T::zero(); src.len()];
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * plane;
            let (mu, is) = (mean[ch], inv_std[ch]);
            let (g, bt) = (gamma.values()[ch], beta.values()[ch]);
            for i in o..o + plane {
                let xh = T::of((src[i].wide() - mu) * is);
                normalized[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }
    let y = Tensor::from_vec(x.shape(), out)?;
    Ok((
        y,
        BatchNormCtx {
            shape: x.shape().to_vec(),
            normalized,
            inv_std,
            gamma: gamma.values().to_vec(),
            train,
            batch_mean: if train { mean } else { Vec::new() },
            batch_var_unbiased: if train { var_unbiased } else { Vec::new() },
        },
    ))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm3d_backward<T: Real>(
    ctx: &BatchNormCtx<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    grad_out.expect_shape(&ctx.shape, "batchnorm3d grad_out")?;
    let dims = grad_out.dims5("batchnorm3d grad_out")?;
    let (n, c, plane) = channel_planes(dims);
    let count = (n * plane) as f64;
    let g = grad_out.values();
    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    let mut grad_in = vec![T::zero(); g.len()];
    for ch in 0..c {
        let (mut sg, mut sgx) = (0.0f64, 0.0f64);
        for b in 0..n {
            let o = (b * c + ch) * plane;
            for i in o..o + plane {
                sg += g[i].wide();
                sgx += g[i].wide() * ctx.normalized[i].wide();
            }
        }
        grad_gamma[ch] = T::of(sgx);
        grad_beta[ch] = T::of(sg);
        let scale = ctx.gamma[ch].wide() * ctx.inv_std[ch];
        for b in 0..n {
            let o = (b * c + ch) * plane;
            for i in o..o + plane {
                grad_in[i] = if ctx.train {
                    T::of(scale * (g[i].wide() - sg / count - ctx.normalized[i].wide() * sgx / count))
                } else {
                    T::of(scale * g[i].wide())
                };
            }
        }
    }
    Ok((Tensor::from_vec(&ctx.shape, grad_in)?, grad_gamma, grad_beta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(c: usize) -> Tensor<f64> {
        Tensor::full(&[c], 1.0)
    }

    #[test]
    fn train_mode_normalizes_each_channel() {
        let x = Tensor::<f64>::from_vec(&[2, 2, 1, 1, 2], vec![1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0]).unwrap();
        let (y, ctx) =
            batchnorm3d_forward(&x, &ones(2), &Tensor::zeros(&[2]), &Tensor::zeros(&[2]), &ones(2), true).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| y.values()[(b * 2 + ch) * 2..][..2].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 4.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        let (m, v) = ctx.updated_running(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((m[0] - 0.1 * 2.5).abs() < 1e-12);
        assert!((v[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let x = Tensor::<f64>::zeros(&[0, 2, 2, 2, 2]);
        let err = batchnorm3d_forward(&x, &ones(2), &ones(2), &ones(2), &ones(2), true).unwrap_err();
        assert!(matches!(err, Error::EmptyBatch));
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::<f64>::full(&[1, 1, 2, 2, 2], 3.0);
        let rm = Tensor::full(&[1], 1.0);
        let rv = Tensor::full(&[1], 4.0 - BN_EPS);
        let (y, ctx) = batchnorm3d_forward(&x, &ones(1), &Tensor::zeros(&[1]), &rm, &rv, false).unwrap();
        assert!(y.values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(ctx.updated_running(rm.values(), rv.values()).is_none());
    }
}
