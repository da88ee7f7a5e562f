use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::math;
use crate::tensor::Tensor;

fn check(x: &Tensor, params: &[&Tensor]) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4("batch_norm")?;
    for p in params {
        if p.shape() != [c] {
            return Err(shape_err(
                "batch_norm",
                alloc::format!("per-channel parameter has shape {:?}, input has {c} channels", p.shape()),
            ));
        }
    }
    Ok((n, c, h * w))
}

/// Per-channel mean and biased variance over N, H, W.
pub fn channel_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, hw) = check(x, &[])?;
    let m = (n * hw) as f64;
    let d = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += d[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for b in 0..n {
            v += d[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|x| (x - mu) * (x - mu)).sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    Ok((mean, var))
}

fn normalise(x: &Tensor, mean: &[f64], var: &[f64], gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, c, hw) = check(x, &[gamma, beta])?;
    let mut out = vec![0.0; x.numel()];
    for ch in 0..c {
        let inv = 1.0 / math::sqrt(var[ch] + eps);
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for bi in 0..n {
            let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
            for (o, &v) in out[r.clone()].iter_mut().zip(&x.data()[r]) {
                *o = (v - mean[ch]) * inv * g + b;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Training-mode normalisation with batch statistics.
pub(crate) fn bn_train_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (mean, var) = channel_stats(x)?;
    normalise(x, &mean, &var, gamma, beta, eps)
}

pub(crate) fn bn_eval_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    check(x, &[mean, var])?;
    normalise(x, mean.data(), var.data(), gamma, beta, eps)
}

/// Gradients of frozen-statistics normalisation with respect to the running
/// mean and variance, from the already reduced `dgamma` and `dbeta`:
/// `dmean = -gamma * inv * dbeta`, `dvar = -gamma * inv^2 * dgamma / 2`.
pub(crate) fn bn_eval_stat_grads(gamma: &Tensor, var: &Tensor, dgamma: &Tensor, dbeta: &Tensor, eps: f64) -> (Tensor, Tensor) {
    let c = gamma.numel();
    let inv = |ch: usize| 1.0 / math::sqrt(var.data()[ch] + eps);
    let dm = (0..c).map(|ch| -gamma.data()[ch] * inv(ch) * dbeta.data()[ch]).collect();
    let dv = (0..c).map(|ch| -0.5 * gamma.data()[ch] * inv(ch) * inv(ch) * dgamma.data()[ch]).collect();
    (Tensor::from_parts(vec![c], dm), Tensor::from_parts(vec![c], dv))
}

/// `(dx, dgamma, dbeta)`; `stats` is `None` in training mode (batch statistics
/// are recomputed and differentiated through) or the frozen `(mean, var)`.
pub(crate) fn bn_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: Option<(&Tensor, &Tensor)>,
    eps: f64,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, hw) = check(x, &[gamma])?;
    let (mean, var) = match stats {
        Some((m, v)) => (m.data().to_vec(), v.data().to_vec()),
        None => channel_stats(x)?,
    };
    let m = (n * hw) as f64;
    let (xd, gd) = (x.data(), g.data());
    let mut dx = vec![0.0; x.numel()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let inv = 1.0 / math::sqrt(var[ch] + eps);
        let (mut sg, mut sgx) = (0.0, 0.0);
        for b in 0..n {
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                let xhat = (xd[i] - mean[ch]) * inv;
                sg += gd[i];
                sgx += gd[i] * xhat;
            }
        }
        dgamma[ch] = sgx;
        dbeta[ch] = sg;
        let gm = gamma.data()[ch];
        for b in 0..n {
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dx[i] = if stats.is_some() {
                    gd[i] * gm * inv
                } else {
                    let xhat = (xd[i] - mean[ch]) * inv;
                    gm * inv * (gd[i] - sg / m - xhat * sgx / m)
                };
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    ))
}
