//! Channel-then-spatial gating over stacked difference features.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvOpts, ParamStore, Session, RELU_GAIN};

pub const DEFAULT_REDUCTION: usize = 4;
pub const SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Debug)]
pub struct GamParams {
    pub channels: usize,
    pub r: usize,
    pub fc1: Conv2d,
    pub fc2: Conv2d,
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub conv3: Conv2d,
    /// Skip the sigmoid on both gates and multiply by the raw maps.
    pub raw_gates: bool,
}

impl GamParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        r: usize,
        raw_gates: bool,
    ) -> Result<Self> {
        if r == 0 || !channels.is_multiple_of(r) || channels / r == 0 {
            return Err(Error::param(
                "gam",
                format!("reduction {r} does not divide {channels} channels"),
            ));
        }
        let hidden = channels / r;
        let pw = ConvOpts::kernel(1);
        let sp = ConvOpts::kernel(SPATIAL_KERNEL);
        Ok(Self {
            channels,
            r,
            fc1: Conv2d::new(store, rng, &format!("{name}.fc1"), channels, hidden, pw.gain(RELU_GAIN))?,
            fc2: Conv2d::new(store, rng, &format!("{name}.fc2"), hidden, channels, pw)?,
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), channels, hidden, sp)?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), hidden),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), hidden, channels, sp)?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), channels),
            conv3: Conv2d::new(store, rng, &format!("{name}.conv3"), channels, channels, pw)?,
            raw_gates,
        })
    }

    fn gate(&self, s: &mut Session<'_>, x: Var) -> Var {
        if self.raw_gates {
            x
        } else {
            s.graph.sigmoid(x)
        }
    }
}

/// `Conv3(M_s(M_c(F)))`; shape preserved.
pub fn gam(s: &mut Session<'_>, f: Var, p: &GamParams) -> Result<Var> {
    let c = s.graph.value(f).dims().c;
    if c != p.channels {
        return Err(Error::shape(
            "gam",
            "channel",
            format!("input has {c} channels, parameters expect {}", p.channels),
        ));
    }
    let h = p.fc1.forward(s, f)?;
    let h = s.graph.relu(h);
    let h = p.fc2.forward(s, h)?;
    let mc = p.gate(s, h);
    let f1 = s.graph.mul(f, mc)?;

    let h = p.conv1.forward(s, f1)?;
    let h = p.bn1.forward(s, h)?;
    let h = s.graph.relu(h);
    let h = p.conv2.forward(s, h)?;
    let h = p.bn2.forward(s, h)?;
    let ms = p.gate(s, h);
    let f2 = s.graph.mul(f1, ms)?;
    p.conv3.forward(s, f2)
}
