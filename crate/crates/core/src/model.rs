//! Siamese change-detection network: shared encoder, per-scale feature
//! disturbance, three difference forms, optional GAM gating, a top-down FPN
//! with optional detail compensation, and a light decoder head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::config::ExperimentConfig;
use crate::dfc::{dfc, DfcParams};
use crate::error::{Error, Result};
use crate::fdf::{gam, mi_loss_var, GamParams, HistogramMi};
use crate::gndd::{disturb_var, NoiseSchedule, NoiseSource, TimeLabel};
use crate::nn::{BatchNorm2d, Conv2d, ConvOpts, ParamStore, Session, StoredParam, RELU_GAIN};
use crate::tensor::Tensor;

pub const NUM_SCALES: usize = 4;
pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Debug)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(
                store,
                rng,
                &format!("{name}.conv"),
                cin,
                cout,
                ConvOpts::kernel(3).stride(stride).no_bias().gain(RELU_GAIN),
            )?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        })
    }

    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        Ok(s.graph.relu(y))
    }
}

#[derive(Clone, Debug)]
struct ScaleBranch {
    proj: Conv2d,
    gam: Option<GamParams>,
    lateral: Conv2d,
}

/// Mutable state threaded through training forwards.
#[derive(Clone, Debug)]
pub struct NoiseState {
    pub schedule: NoiseSchedule,
    pub source: NoiseSource,
}

/// How the per-scale feature disturbance is applied in a forward pass.
pub enum Disturbance<'n> {
    /// Sampled noise; advances the schedule once. Requires training mode.
    Sample(&'n mut NoiseState),
    Off,
}

pub struct ForwardOutput {
    /// `(n, 2, H, W)` class logits.
    pub logits: Var,
    /// MI difference loss, present in training when disturbance and FDF are both on.
    pub mi_loss: Option<Var>,
    /// Encoder features per time and scale, before disturbance.
    pub features: [[Var; NUM_SCALES]; 2],
    /// Stacked difference forms per scale (`3C` channels).
    pub differences: [Var; NUM_SCALES],
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ExperimentConfig,
    pub store: ParamStore,
    stem: ConvBnRelu,
    stages: Vec<[ConvBnRelu; 2]>,
    branches: Vec<ScaleBranch>,
    dfc: Vec<DfcParams>,
    skip: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
    cls: Conv2d,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    config: ExperimentConfig,
    params: Vec<StoredParam>,
}

pub fn build_model(cfg: &ExperimentConfig) -> Result<Model> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = &cfg.model;
    let stem = ConvBnRelu::new(&mut store, &mut rng, "stem", 3, m.stem_channels, 2)?;
    let mut stages = Vec::with_capacity(NUM_SCALES);
    let mut cin = m.stem_channels;
    for (i, &c) in m.channels.iter().enumerate() {
        stages.push([
            ConvBnRelu::new(&mut store, &mut rng, &format!("enc{i}.a"), cin, c, 2)?,
            ConvBnRelu::new(&mut store, &mut rng, &format!("enc{i}.b"), c, c, 1)?,
        ]);
        cin = c;
    }
    let mut branches = Vec::with_capacity(NUM_SCALES);
    for (i, &c) in m.channels.iter().enumerate() {
        let pw = ConvOpts::kernel(1);
        let gam = if cfg.fdf.enabled {
            Some(GamParams::new(
                &mut store,
                &mut rng,
                &format!("gam{i}"),
                3 * c,
                cfg.fdf.gam.reduction,
                cfg.fdf.gam.raw_gates,
            )?)
        } else {
            None
        };
        branches.push(ScaleBranch {
            proj: Conv2d::new(&mut store, &mut rng, &format!("diff{i}.proj"), 2 * c, c, pw)?,
            gam,
            lateral: Conv2d::new(&mut store, &mut rng, &format!("lateral{i}"), 3 * c, m.fpn_width, pw)?,
        });
    }
    let dfc = if cfg.dfc.enabled {
        (0..NUM_SCALES - 1)
            .map(|i| DfcParams::new(&mut store, &mut rng, &format!("dfc{}", i + 1), m.fpn_width))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let f = m.fpn_width;
    let d = m.decoder_width;
    Ok(Model {
        config: cfg.clone(),
        stem,
        stages,
        branches,
        dfc,
        skip: Conv2d::new(&mut store, &mut rng, "skip", m.stem_channels, f, ConvOpts::kernel(1))?,
        dec1: Conv2d::new(&mut store, &mut rng, "dec1", f, d, ConvOpts::kernel(3).gain(RELU_GAIN))?,
        dec2: Conv2d::new(&mut store, &mut rng, "dec2", d, d, ConvOpts::kernel(3).gain(RELU_GAIN))?,
        cls: Conv2d::new(&mut store, &mut rng, "cls", d, NUM_CLASSES, ConvOpts::kernel(1).gain(0.1))?,
        store,
    })
}

impl Model {
    pub fn new_noise_state(&self) -> Result<NoiseState> {
        Ok(NoiseState {
            schedule: NoiseSchedule::new(self.config.optim.iterations, self.config.gndd.lambda)?,
            source: NoiseSource::new(self.config.noise_seed()),
        })
    }

    fn encode(&self, s: &mut Session<'_>, x: Var) -> Result<(Var, [Var; NUM_SCALES])> {
        let stem = self.stem.forward(s, x)?;
        let mut feats = Vec::with_capacity(NUM_SCALES);
        let mut h = stem;
        for [a, b] in &self.stages {
            h = a.forward(s, h)?;
            h = b.forward(s, h)?;
            feats.push(h);
        }
        Ok((stem, feats.try_into().expect("four stages")))
    }

    /// Full forward pass. With `Disturbance::Sample` the schedule counts the
    /// pass even when the disturbance is disabled in the configuration.
    pub fn forward(&self, s: &mut Session<'_>, a: Var, b: Var, disturbance: Disturbance<'_>) -> Result<ForwardOutput> {
        let (da, db) = (s.graph.value(a).dims(), s.graph.value(b).dims());
        if da != db {
            return Err(Error::shape("forward", "height", format!("time A {da} vs time B {db}")));
        }
        if da.c != 3 {
            return Err(Error::shape(
                "forward",
                "channel",
                format!("expected 3 input channels, got {}", da.c),
            ));
        }
        let stride = 1 << (NUM_SCALES + 1);
        if da.h % stride != 0 || da.w % stride != 0 || da.h == 0 || da.w == 0 {
            return Err(Error::shape(
                "forward",
                "height",
                format!("input {da} must be a positive multiple of {stride}"),
            ));
        }
        let training = s.is_training();
        let (stem_a, fa) = self.encode(s, a)?;
        let (stem_b, fb) = self.encode(s, b)?;

        let cfg = &self.config;
        let mut disturbed = [fa, fb];
        let mut mi_loss = None;
        let times = [TimeLabel::A, TimeLabel::B];
        if let Disturbance::Sample(noise) = disturbance {
            if !training {
                return Err(Error::Usage("sampled disturbance needs a training session".into()));
            }
            noise.schedule.advance();
            if cfg.gndd.enabled {
                for sc in 0..NUM_SCALES {
                    for (t, time) in times.into_iter().enumerate() {
                        let f = [fa, fb][t][sc];
                        disturbed[t][sc] = disturb_var(&mut s.graph, f, time, sc, &noise.schedule, &noise.source, true)?;
                    }
                }
                if cfg.fdf.enabled {
                    let last = NUM_SCALES - 1;
                    let c = s.graph.value(fa[last]).dims().c;
                    let k = cfg.fdf.mi_channels.min(c);
                    let mut slice = |v: Var| s.graph.slice_channels(v, 0, k);
                    let parts = [
                        slice(fa[last])?,
                        slice(fb[last])?,
                        slice(disturbed[0][last])?,
                        slice(disturbed[1][last])?,
                    ];
                    let hist = HistogramMi::soft(cfg.fdf.bins)?;
                    mi_loss = Some(mi_loss_var(&mut s.graph, parts[0], parts[1], parts[2], parts[3], &hist)?);
                }
            }
        }

        let mut differences = Vec::with_capacity(NUM_SCALES);
        let mut laterals = Vec::with_capacity(NUM_SCALES);
        for (sc, br) in self.branches.iter().enumerate() {
            let (xa, xb) = (disturbed[0][sc], disturbed[1][sc]);
            let diff = s.graph.sub(xa, xb)?;
            let abs = s.graph.abs(diff);
            let prod = s.graph.mul(xa, xb)?;
            let cat = s.graph.concat_channels(&[xa, xb])?;
            let proj = br.proj.forward(s, cat)?;
            let stack = s.graph.concat_channels(&[abs, prod, proj])?;
            differences.push(stack);
            let gated = match &br.gam {
                Some(p) => gam(s, stack, p)?,
                None => stack,
            };
            laterals.push(br.lateral.forward(s, gated)?);
        }

        let mut p = laterals[NUM_SCALES - 1];
        for sc in (0..NUM_SCALES - 1).rev() {
            let coarse = match self.dfc.get(sc) {
                Some(params) => dfc(s, p, params)?,
                None => p,
            };
            let up = s.graph.upsample2x(coarse)?;
            p = s.graph.add(laterals[sc], up)?;
        }

        let stem_diff = s.graph.sub(stem_a, stem_b)?;
        let stem_diff = s.graph.abs(stem_diff);
        let skip = self.skip.forward(s, stem_diff)?;
        let up = s.graph.upsample2x(p)?;
        let h = s.graph.add(up, skip)?;
        let h = self.dec1.forward(s, h)?;
        let h = s.graph.relu(h);
        let h = self.dec2.forward(s, h)?;
        let h = s.graph.relu(h);
        let h = self.cls.forward(s, h)?;
        let logits = s.graph.upsample2x(h)?;

        Ok(ForwardOutput {
            logits,
            mi_loss,
            features: [fa, fb],
            differences: differences.try_into().expect("four scales"),
        })
    }

    /// Eval-mode logits for a batch.
    pub fn logits(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(&self.store, false);
        let va = s.graph.constant(a.clone());
        let vb = s.graph.constant(b.clone());
        let out = self.forward(&mut s, va, vb, Disturbance::Off)?;
        Ok(s.graph.value(out.logits).clone())
    }

    /// Eval-mode `{0, 1}` predictions, row-major per image.
    pub fn predict(&self, a: &Tensor, b: &Tensor) -> Result<Vec<u8>> {
        Ok(argmax_mask(&self.logits(a, b)?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile {
            config: self.config.clone(),
            params: self.store.snapshot(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        let mut model = build_model(&file.config)?;
        model.store.restore(&file.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Class-1 wins strictly over class 0.
pub fn argmax_mask(logits: &Tensor) -> Vec<u8> {
    let d = logits.dims();
    let mut out = Vec::with_capacity(d.n * d.plane());
    for n in 0..d.n {
        for y in 0..d.h {
            for x in 0..d.w {
                out.push((logits.at(n, 1, y, x) > logits.at(n, 0, y, x)) as u8);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model.channels = [4, 8, 8, 8];
        cfg.model.stem_channels = 4;
        cfg.model.fpn_width = 8;
        cfg.model.decoder_width = 4;
        cfg
    }

    #[test]
    fn logits_match_input_size() {
        let model = build_model(&small()).unwrap();
        let x = Tensor::from_fn([2, 3, 32, 32], |n, c, h, w| ((n + c + h * w) as f64 * 0.1).sin());
        let y = Tensor::from_fn([2, 3, 32, 32], |n, c, h, w| ((n * c + h + w) as f64 * 0.1).cos());
        let l = model.logits(&x, &y).unwrap();
        assert_eq!(l.dims().as_array(), [2, 2, 32, 32]);
        assert!(l.is_finite());
    }

    #[test]
    fn bad_input_size_rejected() {
        let model = build_model(&small()).unwrap();
        let x = Tensor::zeros([1, 3, 20, 20]);
        assert!(matches!(model.logits(&x, &x), Err(Error::Shape { .. })));
    }

    #[test]
    fn json_round_trip() {
        let model = build_model(&small()).unwrap();
        let back = Model::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back.store.snapshot(), model.store.snapshot());
    }
}
