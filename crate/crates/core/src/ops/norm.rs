//! Per-channel batch normalization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics of one training batch (population variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
        }
    }

    /// Exponential moving average update; the variance uses the unbiased estimate.
    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (rm, &bm) in self.mean.iter_mut().zip(&stats.mean) {
            *rm = (1.0 - m) * *rm + m * bm;
        }
        for (rv, &bv) in self.var.iter_mut().zip(&stats.var) {
            *rv = (1.0 - m) * *rv + m * bv * correction;
        }
    }
}

fn check(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<()> {
    const OP: &str = "batch_norm";
    if !(eps > 0.0) {
        return Err(Error::param(OP, format!("eps must be positive, got {eps}")));
    }
    let c = x.dims().c;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            OP,
            "channel",
            format!("gamma/beta lengths {}/{} for {c} channels", gamma.len(), beta.len()),
        ));
    }
    Ok(())
}

fn channel_stats(x: &Tensor) -> BatchStats {
    let d = x.dims();
    let plane = d.plane();
    let count = d.n * plane;
    let mut mean = vec![0.0; d.c];
    let mut var = vec![0.0; d.c];
    for c in 0..d.c {
        let chunks = (0..d.n).map(|n| &x.data()[(n * d.c + c) * plane..][..plane]);
        let m = chunks.clone().flatten().sum::<f64>() / count as f64;
        let v = chunks.flatten().map(|&v| (v - m) * (v - m)).sum::<f64>() / count as f64;
        mean[c] = m;
        var[c] = v;
    }
    BatchStats { mean, var, count }
}

/// Returns the normalized output and, in training mode, the batch statistics
/// the caller should fold into its running estimates.
pub fn batch_norm(x: &Tensor, gamma: &[f64], beta: &[f64], mode: BnMode<'_>, eps: f64) -> Result<(Tensor, Option<BatchStats>)> {
    check(x, gamma, beta, eps)?;
    let d = x.dims();
    let (mean, var, stats) = match mode {
        BnMode::Train => {
            let s = channel_stats(x);
            (s.mean.clone(), s.var.clone(), Some(s))
        }
        BnMode::Eval {
            running_mean,
            running_var,
        } => {
            if running_mean.len() != d.c || running_var.len() != d.c {
                return Err(Error::shape("batch_norm", "channel", "running statistics length"));
            }
            (running_mean.to_vec(), running_var.to_vec(), None)
        }
    };
    let plane = d.plane();
    let mut out = x.clone();
    for n in 0..d.n {
        for c in 0..d.c {
            let inv = 1.0 / (var[c] + eps).sqrt();
            let (g, b, m) = (gamma[c], beta[c], mean[c]);
            for v in &mut out.data_mut()[(n * d.c + c) * plane..][..plane] {
                *v = g * (*v - m) * inv + b;
            }
        }
    }
    Ok((out, stats))
}

/// Gradients `(dx, dgamma, dbeta)` of [`batch_norm`].
pub fn batch_norm_backward(
    x: &Tensor,
    gamma: &[f64],
    mode: BnMode<'_>,
    eps: f64,
    dy: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    check(x, gamma, gamma, eps)?;
    x.expect_same_dims(dy, "batch_norm_backward")?;
    let d = x.dims();
    let plane = d.plane();
    let (mean, var, train) = match mode {
        BnMode::Train => {
            let s = channel_stats(x);
            (s.mean, s.var, true)
        }
        BnMode::Eval {
            running_mean,
            running_var,
        } => (running_mean.to_vec(), running_var.to_vec(), false),
    };
    let count = (d.n * plane) as f64;
    let mut dx = Tensor::zeros(d);
    let mut dgamma = vec![0.0; d.c];
    let mut dbeta = vec![0.0; d.c];
    for c in 0..d.c {
        let inv = 1.0 / (var[c] + eps).sqrt();
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for n in 0..d.n {
            let base = (n * d.c + c) * plane;
            for p in 0..plane {
                let xhat = (x.data()[base + p] - mean[c]) * inv;
                sum_dy += dy.data()[base + p];
                sum_dy_xhat += dy.data()[base + p] * xhat;
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        for n in 0..d.n {
            let base = (n * d.c + c) * plane;
            for p in 0..plane {
                let g = dy.data()[base + p];
                dx.data_mut()[base + p] = if train {
                    let xhat = (x.data()[base + p] - mean[c]) * inv;
                    gamma[c] * inv * (g - sum_dy / count - xhat * sum_dy_xhat / count)
                } else {
                    gamma[c] * inv * g
                };
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}
