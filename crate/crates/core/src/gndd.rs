//! Gaussian noise domain disturbance.
//!
//! Each feature map of each image is summarized by the mean and population
//! standard deviation of all its values. Noise drawn from that Gaussian is
//! scaled by the training scheduler weight and added back onto the map.
//! The noise is a constant with respect to differentiation and is only
//! applied in training mode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TimeLabel {
    A,
    B,
}

impl TimeLabel {
    fn code(self) -> u64 {
        match self {
            TimeLabel::A => 0,
            TimeLabel::B => 1,
        }
    }
}

/// Mean / standard deviation of one image's feature map at one scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mu: f64,
    pub sigma: f64,
    pub time: TimeLabel,
    pub batch_index: usize,
    pub scale_index: usize,
}

/// Per-image statistics over all channel and spatial positions.
pub fn compute_stats(f: &Tensor, time: TimeLabel, scale_index: usize) -> Result<Vec<GaussianStats>> {
    let d = f.dims();
    if d.image_len() == 0 {
        return Err(Error::shape(
            "compute_stats",
            "channel",
            format!("no pixels per image in {d}"),
        ));
    }
    Ok((0..d.n)
        .map(|i| {
            let img = f.image(i);
            let first = img[0];
            let (mu, sigma) = if img.iter().all(|&v| v == first) {
                (first, 0.0)
            } else {
                let n = img.len() as f64;
                let mu = img.iter().sum::<f64>() / n;
                let var = img.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
                (mu, var.sqrt())
            };
            GaussianStats {
                mu,
                sigma,
                time,
                batch_index: i,
                scale_index,
            }
        })
        .collect())
}

/// `mu + sigma * Z` with `Z` iid standard normal, filled in row-major order.
pub fn sample_noise<R: rand::Rng + ?Sized>(stats: &GaussianStats, dims: impl Into<Dims>, rng: &mut R) -> Result<Tensor> {
    if !(stats.sigma >= 0.0) {
        return Err(Error::param(
            "sample_noise",
            format!("sigma must be >= 0, got {}", stats.sigma),
        ));
    }
    let dims = dims.into();
    let data = (0..dims.numel())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            stats.mu + stats.sigma * z
        })
        .collect();
    Tensor::new(dims, data)
}

/// Forward-pass counter, total iterations and strength of the noise scheduler.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub forward_passes: u64,
    pub total_iterations: u64,
    pub lambda: f64,
}

impl NoiseSchedule {
    pub fn new(total_iterations: u64, lambda: f64) -> Result<Self> {
        let s = Self {
            forward_passes: 0,
            total_iterations,
            lambda,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if self.total_iterations == 0 {
            return Err(Error::param("noise_schedule", "total iterations must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::param(
                "noise_schedule",
                format!("lambda must be >= 0, got {}", self.lambda),
            ));
        }
        Ok(())
    }

    /// Counts one forward pass.
    pub fn advance(&mut self) {
        self.forward_passes += 1;
    }

    pub fn weight(&self) -> Result<f64> {
        noise_weight(self)
    }
}

/// `min(f_t / f_T, 1) * lambda`.
pub fn noise_weight(s: &NoiseSchedule) -> Result<f64> {
    s.validate()?;
    let c = (s.forward_passes as f64 / s.total_iterations as f64).min(1.0);
    Ok(c * s.lambda)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded source of per-`(pass, time, image, scale)` noise streams.
///
/// Every stream is derived from its coordinates alone, so the draws do not
/// depend on the order in which images or scales are processed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSource {
    pub seed: u64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn stream(&self, pass: u64, time: TimeLabel, image: usize, scale: usize) -> ChaCha8Rng {
        let mut h = splitmix64(self.seed);
        for part in [pass, time.code(), image as u64, scale as u64] {
            h = splitmix64(h ^ part);
        }
        ChaCha8Rng::seed_from_u64(h)
    }
}

/// The additive term `w_noise * Noise` for every image of `f`, or `None`
/// when the disturbance is inactive (evaluation, or zero weight).
pub fn disturbance(
    f: &Tensor,
    time: TimeLabel,
    scale: usize,
    sched: &NoiseSchedule,
    source: &NoiseSource,
    training: bool,
) -> Result<Option<Tensor>> {
    let w = noise_weight(sched)?;
    if !training || w == 0.0 {
        return Ok(None);
    }
    let stats = compute_stats(f, time, scale)?;
    let d = f.dims();
    let per_image = Dims::new(1, d.c, d.h, d.w);
    let mut out = Tensor::zeros(d);
    for st in &stats {
        let mut rng = source.stream(sched.forward_passes, time, st.batch_index, scale);
        let noise = sample_noise(st, per_image, &mut rng)?;
        for (o, &z) in out.image_mut(st.batch_index).iter_mut().zip(noise.data()) {
            *o = w * z;
        }
    }
    Ok(Some(out))
}

/// `F + w_noise * Noise`; the identity when inactive.
pub fn disturb(
    f: &Tensor,
    time: TimeLabel,
    scale: usize,
    sched: &NoiseSchedule,
    source: &NoiseSource,
    training: bool,
) -> Result<Tensor> {
    match disturbance(f, time, scale, sched, source, training)? {
        None => Ok(f.clone()),
        Some(n) => f.zip_map(&n, "disturb", |a, b| a + b),
    }
}

/// Graph form of [`disturb`]: the noise enters as a constant, so gradients
/// pass through to `f` unchanged.
pub fn disturb_var(
    g: &mut Graph,
    f: Var,
    time: TimeLabel,
    scale: usize,
    sched: &NoiseSchedule,
    source: &NoiseSource,
    training: bool,
) -> Result<Var> {
    match disturbance(g.value(f), time, scale, sched, source, training)? {
        None => Ok(f),
        Some(n) => {
            let c = g.constant(n);
            g.add(f, c)
        }
    }
}
