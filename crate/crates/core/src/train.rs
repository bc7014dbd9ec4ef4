//! Training loop and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, confusion, ConfusionCounts, MetricsReport};
use crate::model::{build_model, Disturbance, Model};
use crate::nn::{cross_entropy, AdamW, Session};
use crate::synth::Dataset;

pub const EVAL_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub fingerprint: String,
    pub config: ExperimentConfig,
    pub seg_losses: Vec<f64>,
    pub mi_losses: Vec<f64>,
    pub total_losses: Vec<f64>,
    pub forward_passes: u64,
    pub metrics: MetricsReport,
    pub counts: ConfusionCounts,
    /// Excluded from the serialized report so reports stay reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Batch index order for every iteration: reshuffled each pass over the data.
pub fn batch_schedule(len: usize, batch: usize, iterations: u64, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_ba7c);
    let mut order: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(iterations as usize);
    for _ in 0..iterations {
        let mut b = Vec::with_capacity(batch.min(len));
        while b.len() < batch.min(len) {
            if order.is_empty() {
                order = (0..len).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            b.push(order.pop().expect("refilled"));
        }
        out.push(b);
    }
    out
}

/// Trains a fresh model; metrics are computed on `validation`, or on the
/// training set when none is given.
pub fn train(cfg: &ExperimentConfig, data: &Dataset, validation: Option<&Dataset>) -> Result<(Model, TrainReport)> {
    train_with_progress(cfg, data, validation, |_, _| {})
}

pub fn train_with_progress(
    cfg: &ExperimentConfig,
    data: &Dataset,
    validation: Option<&Dataset>,
    mut progress: impl FnMut(u64, f64),
) -> Result<(Model, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Usage("train: dataset is empty".into()));
    }
    let start = Instant::now();
    let mut model = build_model(cfg)?;
    let mut noise = model.new_noise_state()?;
    let mut opt = AdamW::new(cfg.optim.lr, cfg.optim.weight_decay);
    let schedule = batch_schedule(data.len(), cfg.optim.batch_size, cfg.optim.iterations, cfg.seed);
    let mut seg_losses = Vec::with_capacity(schedule.len());
    let mut mi_losses = Vec::with_capacity(schedule.len());
    let mut total_losses = Vec::with_capacity(schedule.len());

    for (it, idx) in schedule.iter().enumerate() {
        let (a, b, labels) = data.batch(idx)?;
        let (grads, updates, seg, mi, total) = {
            let mut s = Session::new(&model.store, true);
            let va = s.graph.constant(a);
            let vb = s.graph.constant(b);
            let out = model.forward(&mut s, va, vb, Disturbance::Sample(&mut noise))?;
            let seg = cross_entropy(&mut s.graph, out.logits, &labels)?;
            let (loss, mi) = match out.mi_loss {
                Some(mi) if cfg.mi_active() => {
                    let weighted = s.graph.scale(mi, cfg.fdf.mi_weight);
                    (s.graph.add(seg, weighted)?, s.graph.value(mi).data()[0])
                }
                _ => (seg, 0.0),
            };
            let total = s.graph.value(loss).data()[0];
            if !total.is_finite() {
                return Err(Error::Divergence {
                    iteration: it,
                    loss: total,
                });
            }
            s.graph.backward(loss)?;
            (
                s.gradients(),
                s.bn_updates().to_vec(),
                s.graph.value(seg).data()[0],
                mi,
                total,
            )
        };
        opt.step(&mut model.store, &grads);
        for u in &updates {
            model.store.apply_bn_update(u);
        }
        seg_losses.push(seg);
        mi_losses.push(mi);
        total_losses.push(total);
        progress(it as u64, total);
    }

    let (metrics, counts) = evaluate_counts(&model, validation.unwrap_or(data))?;
    let report = TrainReport {
        seed: cfg.seed,
        fingerprint: cfg.fingerprint(),
        config: cfg.clone(),
        seg_losses,
        mi_losses,
        total_losses,
        forward_passes: noise.schedule.forward_passes,
        metrics,
        counts,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Micro-averaged confusion counts of eval-mode predictions.
pub fn evaluate_counts(model: &Model, data: &Dataset) -> Result<(MetricsReport, ConfusionCounts)> {
    if data.is_empty() {
        return Err(Error::Usage("evaluate: dataset is empty".into()));
    }
    let mut counts = ConfusionCounts::default();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (a, b, labels) = data.batch(chunk)?;
        let pred = model.predict(&a, &b)?;
        counts += confusion(&pred, &labels)?;
    }
    Ok((compute_metrics(&counts, 1.0)?, counts))
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<MetricsReport> {
    Ok(evaluate_counts(model, data)?.0)
}
