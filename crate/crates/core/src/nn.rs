//! Parameters, layers, the AdamW optimizer and the segmentation loss.
//!
//! Parameters live in a [`ParamStore`]; each forward pass opens a
//! [`Session`] that binds them into a fresh [`Graph`] on first use.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::ops::{BatchStats, BnMode, Conv2dSpec, RunningStats, BN_EPS, BN_MOMENTUM};
use crate::tensor::{Dims, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Serialized form of one parameter or buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub dims: [usize; 4],
    pub trainable: bool,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, true)
    }

    /// Registers non-trainable state (e.g. running statistics).
    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(Entry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    pub fn snapshot(&self) -> Vec<StoredParam> {
        self.entries
            .iter()
            .map(|e| StoredParam {
                name: e.name.clone(),
                dims: e.value.dims().as_array(),
                trainable: e.trainable,
                data: e.value.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites values from a snapshot taken of an identically built store.
    pub fn restore(&mut self, stored: &[StoredParam]) -> Result<()> {
        if stored.len() != self.entries.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                stored.len(),
                self.entries.len()
            )));
        }
        for (e, s) in self.entries.iter_mut().zip(stored) {
            if e.name != s.name || e.value.dims().as_array() != s.dims {
                return Err(Error::Config(format!(
                    "checkpoint tensor `{}` {:?} does not match `{}` {}",
                    s.name,
                    s.dims,
                    e.name,
                    e.value.dims()
                )));
            }
            e.value = Tensor::new(s.dims, s.data.clone())?;
        }
        Ok(())
    }

    pub fn apply_bn_update(&mut self, u: &BnUpdate) {
        let mut rs = RunningStats {
            mean: self.get(u.mean).data().to_vec(),
            var: self.get(u.var).data().to_vec(),
            momentum: u.momentum,
        };
        rs.update(&u.stats);
        self.get_mut(u.mean).data_mut().copy_from_slice(&rs.mean);
        self.get_mut(u.var).data_mut().copy_from_slice(&rs.var);
    }
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// One forward pass: a graph plus lazily bound parameters.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    training: bool,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, training: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            training,
            bn_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The graph node for a parameter, created on first request.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.store.is_trainable(id) {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn record_bn_update(&mut self, u: BnUpdate) {
        self.bn_updates.push(u);
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    /// Gradients of every bound trainable parameter after `graph.backward`.
    pub fn gradients(&self) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let id = ParamId(i);
                if !self.store.is_trainable(id) {
                    return None;
                }
                self.graph.grad(v).map(|g| (id, g.clone()))
            })
            .collect()
    }
}

/// Uniform fan-in scaled initialization: `U(-gain/sqrt(fan_in), gain/sqrt(fan_in))`.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, dims: impl Into<Dims>, fan_in: usize, gain: f64) -> Tensor {
    let dims = dims.into();
    let bound = gain / (fan_in.max(1) as f64).sqrt();
    let data = (0..dims.numel()).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(dims, data).expect("dims match by construction")
}

/// He-uniform gain for ReLU stacks.
pub const RELU_GAIN: f64 = 2.449_489_742_783_178; // sqrt(6)

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvOpts {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
    pub gain: f64,
}

impl ConvOpts {
    pub fn kernel(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: true,
            gain: 1.0,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn gain(mut self, g: f64) -> Self {
        self.gain = g;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        opts: ConvOpts,
    ) -> Result<Self> {
        if opts.groups == 0 || !in_channels.is_multiple_of(opts.groups) || !out_channels.is_multiple_of(opts.groups) {
            return Err(Error::Config(format!(
                "{name}: {in_channels}->{out_channels} channels incompatible with {} groups",
                opts.groups
            )));
        }
        let cin_g = in_channels / opts.groups;
        let k = opts.kernel;
        let w = uniform_init(rng, [out_channels, cin_g, k, k], cin_g * k * k, opts.gain);
        let weight = store.param(format!("{name}.weight"), w);
        let bias = opts
            .bias
            .then(|| store.param(format!("{name}.bias"), Tensor::zeros([1, out_channels, 1, 1])));
        Ok(Self {
            weight,
            bias,
            spec: Conv2dSpec::new(opts.stride, opts.padding, opts.groups),
            in_channels,
            out_channels,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.param(format!("{name}.gamma"), Tensor::ones([1, channels, 1, 1])),
            beta: store.param(format!("{name}.beta"), Tensor::zeros([1, channels, 1, 1])),
            running_mean: store.buffer(format!("{name}.running_mean"), Tensor::zeros([1, channels, 1, 1])),
            running_var: store.buffer(format!("{name}.running_var"), Tensor::ones([1, channels, 1, 1])),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        if s.is_training() {
            let (y, stats) = s.graph.batch_norm(x, gamma, beta, BnMode::Train, self.eps)?;
            if let Some(stats) = stats {
                s.record_bn_update(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    momentum: self.momentum,
                    stats,
                });
            }
            Ok(y)
        } else {
            let store = s.store();
            let rm = store.get(self.running_mean).data().to_vec();
            let rv = store.get(self.running_var).data().to_vec();
            let mode = BnMode::Eval {
                running_mean: &rm,
                running_var: &rv,
            };
            Ok(s.graph.batch_norm(x, gamma, beta, mode, self.eps)?.0)
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w -= self.lr * self.weight_decay * *w;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

struct CrossEntropyRule {
    targets: Vec<u8>,
}

fn log_softmax_at(logits: &Tensor, n: usize, h: usize, w: usize) -> (f64, Vec<f64>) {
    let k = logits.dims().c;
    let m = (0..k).map(|c| logits.at(n, c, h, w)).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = (0..k).map(|c| (logits.at(n, c, h, w) - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    (m + z.ln(), exps.into_iter().map(|e| e / z).collect())
}

impl Backward for CrossEntropyRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let logits = inputs[0];
        let d = logits.dims();
        let scale = grad_out.data()[0] / (d.n * d.plane()) as f64;
        let mut dx = Tensor::zeros(d);
        for n in 0..d.n {
            for h in 0..d.h {
                for w in 0..d.w {
                    let (_, probs) = log_softmax_at(logits, n, h, w);
                    let t = self.targets[(n * d.h + h) * d.w + w] as usize;
                    for (c, p) in probs.into_iter().enumerate() {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        dx.set(n, c, h, w, scale * (p - onehot));
                    }
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Mean pixelwise cross-entropy of `(n, classes, h, w)` logits against class
/// indices laid out as `(n, h, w)`.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &[u8]) -> Result<Var> {
    let lv = g.value(logits);
    let d = lv.dims();
    if targets.len() != d.n * d.plane() {
        return Err(Error::shape(
            "cross_entropy",
            "height",
            format!("{} targets for logits {d}", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= d.c) {
        return Err(Error::Validation(format!("target class {bad} >= {} classes", d.c)));
    }
    let mut total = 0.0;
    for n in 0..d.n {
        for h in 0..d.h {
            for w in 0..d.w {
                let (lse, _) = log_softmax_at(lv, n, h, w);
                let t = targets[(n * d.h + h) * d.w + w] as usize;
                total += lse - lv.at(n, t, h, w);
            }
        }
    }
    let value = Tensor::scalar(total / (d.n * d.plane()) as f64);
    Ok(g.custom(
        &[logits],
        value,
        Box::new(CrossEntropyRule {
            targets: targets.to_vec(),
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;

    #[test]
    fn uniform_logits_cost_ln2() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros([2, 2, 3, 3]));
        let targets: Vec<u8> = (0..18).map(|i| (i % 2) as u8).collect();
        let loss = cross_entropy(&mut g, l, &targets).unwrap();
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient() {
        let x = Tensor::from_fn([2, 2, 2, 3], |n, c, h, w| ((n * 11 + c * 7 + h * 3 + w) as f64).sin() * 2.0);
        let targets: Vec<u8> = (0..12).map(|i| ((i * 7) % 3 == 0) as u8).collect();
        let err = finite_difference_check(|g, v| cross_entropy(g, v, &targets), &x, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.param("w", Tensor::from_vec(vec![1.0, -1.0]));
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut store, &[(id, Tensor::from_vec(vec![3.0, -0.5]))]);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn restore_rejects_mismatched_checkpoint() {
        let mut a = ParamStore::new();
        a.param("w", Tensor::zeros([1, 1, 1, 2]));
        let mut b = ParamStore::new();
        b.param("w", Tensor::zeros([1, 1, 1, 3]));
        assert!(b.restore(&a.snapshot()).is_err());
    }
}
