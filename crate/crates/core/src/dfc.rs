//! Detail feature compensation.
//!
//! `dfc(F) = dem(F) ⊙ gem(gem(F))` where
//!
//! * `dem` concatenates three 1x1 projections of `F` (3C channels), runs a
//!   3x3 depthwise convolution, ReLU, and a pointwise convolution back to C.
//! * `gem` is one criss-cross attention pass: every position attends over
//!   the `W + H - 1` positions that share its row or column (itself counted
//!   once), with unscaled dot-product logits, and the result is added back
//!   onto the input. The two passes share their projections.

use rand::Rng;

use crate::autograd::{Backward, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvOpts, ParamStore, Session, RELU_GAIN};
use crate::tensor::{Dims, Tensor};

#[derive(Clone, Debug)]
pub struct DfcParams {
    pub channels: usize,
    pub dem_q: Conv2d,
    pub dem_k: Conv2d,
    pub dem_v: Conv2d,
    pub dem_dw: Conv2d,
    pub dem_pw: Conv2d,
    pub gem_q: Conv2d,
    pub gem_k: Conv2d,
    pub gem_v: Conv2d,
}

impl DfcParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize) -> Result<Self> {
        let c = channels;
        let pw = ConvOpts::kernel(1);
        Ok(Self {
            channels,
            dem_q: Conv2d::new(store, rng, &format!("{name}.dem.q"), c, c, pw)?,
            dem_k: Conv2d::new(store, rng, &format!("{name}.dem.k"), c, c, pw)?,
            dem_v: Conv2d::new(store, rng, &format!("{name}.dem.v"), c, c, pw)?,
            dem_dw: Conv2d::new(
                store,
                rng,
                &format!("{name}.dem.dw"),
                3 * c,
                3 * c,
                ConvOpts::kernel(3).groups(3 * c).gain(RELU_GAIN),
            )?,
            dem_pw: Conv2d::new(store, rng, &format!("{name}.dem.pw"), 3 * c, c, pw)?,
            gem_q: Conv2d::new(store, rng, &format!("{name}.gem.q"), c, c, pw)?,
            gem_k: Conv2d::new(store, rng, &format!("{name}.gem.k"), c, c, pw)?,
            gem_v: Conv2d::new(store, rng, &format!("{name}.gem.v"), c, c, pw)?,
        })
    }

    /// Parameters of the DEM projection convolutions (weights and biases).
    pub fn dem_projections(&self) -> [&Conv2d; 3] {
        [&self.dem_q, &self.dem_k, &self.dem_v]
    }

    pub fn gem_projections(&self) -> [&Conv2d; 3] {
        [&self.gem_q, &self.gem_k, &self.gem_v]
    }
}

fn check_channels(s: &Session<'_>, f: Var, p: &DfcParams, op: &'static str) -> Result<()> {
    let c = s.graph.value(f).dims().c;
    if c != p.channels {
        return Err(Error::shape(
            op,
            "channel",
            format!("input has {c} channels, parameters expect {}", p.channels),
        ));
    }
    Ok(())
}

/// Detail enhancement branch; output shape equals input shape.
pub fn dem(s: &mut Session<'_>, f: Var, p: &DfcParams) -> Result<Var> {
    check_channels(s, f, p, "dem")?;
    let q = p.dem_q.forward(s, f)?;
    let k = p.dem_k.forward(s, f)?;
    let v = p.dem_v.forward(s, f)?;
    let head = s.graph.concat_channels(&[q, k, v])?;
    let dw = p.dem_dw.forward(s, head)?;
    let act = s.graph.relu(dw);
    p.dem_pw.forward(s, act)
}

/// Position of cross element `j` for query `(y, x)` on an `h x w` grid:
/// `j < w` walks the row, the rest walk the column skipping row `y`.
#[inline]
pub fn cross_position(h: usize, w: usize, y: usize, x: usize, j: usize) -> (usize, usize) {
    debug_assert!(j < h + w - 1);
    if j < w {
        (y, j)
    } else {
        let r = j - w;
        (if r < y { r } else { r + 1 }, x)
    }
}

/// Cross logits `L[n, j, y, x] = <K[n, :, cross_j(y, x)], Q[n, :, y, x]>`.
pub fn cross_logits(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    q.expect_same_dims(k, "cross_logits")?;
    let d = q.dims();
    if d.h == 0 || d.w == 0 {
        return Err(Error::shape("cross_logits", "height", format!("empty grid {d}")));
    }
    let span = d.h + d.w - 1;
    let mut out = Tensor::zeros(Dims::new(d.n, span, d.h, d.w));
    for n in 0..d.n {
        for y in 0..d.h {
            for x in 0..d.w {
                for j in 0..span {
                    let (yy, xx) = cross_position(d.h, d.w, y, x, j);
                    let dot: f64 = (0..d.c).map(|c| k.at(n, c, yy, xx) * q.at(n, c, y, x)).sum();
                    out.set(n, j, y, x, dot);
                }
            }
        }
    }
    Ok(out)
}

/// `O[n, c, y, x] = Σ_j A[n, j, y, x] · V[n, c, cross_j(y, x)]`.
pub fn cross_aggregate(attn: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (ad, vd) = (attn.dims(), v.dims());
    if ad.n != vd.n || ad.h != vd.h || ad.w != vd.w {
        return Err(Error::shape(
            "cross_aggregate",
            "height",
            format!("attention {ad} vs values {vd}"),
        ));
    }
    if ad.c != vd.h + vd.w - 1 {
        return Err(Error::shape(
            "cross_aggregate",
            "channel",
            format!("attention has {} cross entries, grid needs {}", ad.c, vd.h + vd.w - 1),
        ));
    }
    let mut out = Tensor::zeros(vd);
    for n in 0..vd.n {
        for y in 0..vd.h {
            for x in 0..vd.w {
                for j in 0..ad.c {
                    let a = attn.at(n, j, y, x);
                    let (yy, xx) = cross_position(vd.h, vd.w, y, x, j);
                    for c in 0..vd.c {
                        let o = out.offset(n, c, y, x);
                        out.data_mut()[o] += a * v.at(n, c, yy, xx);
                    }
                }
            }
        }
    }
    Ok(out)
}

struct CrossLogitsRule;

impl Backward for CrossLogitsRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (q, k) = (inputs[0], inputs[1]);
        let d = q.dims();
        let span = d.h + d.w - 1;
        let mut dq = Tensor::zeros(d);
        let mut dk = Tensor::zeros(d);
        for n in 0..d.n {
            for y in 0..d.h {
                for x in 0..d.w {
                    for j in 0..span {
                        let gl = g.at(n, j, y, x);
                        if gl == 0.0 {
                            continue;
                        }
                        let (yy, xx) = cross_position(d.h, d.w, y, x, j);
                        for c in 0..d.c {
                            let qo = dq.offset(n, c, y, x);
                            let ko = dk.offset(n, c, yy, xx);
                            dq.data_mut()[qo] += gl * k.data()[ko];
                            dk.data_mut()[ko] += gl * q.data()[qo];
                        }
                    }
                }
            }
        }
        Ok(vec![needs[0].then_some(dq), needs[1].then_some(dk)])
    }
}

struct CrossAggregateRule;

impl Backward for CrossAggregateRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (attn, v) = (inputs[0], inputs[1]);
        let (ad, vd) = (attn.dims(), v.dims());
        let mut da = Tensor::zeros(ad);
        let mut dv = Tensor::zeros(vd);
        for n in 0..vd.n {
            for y in 0..vd.h {
                for x in 0..vd.w {
                    for j in 0..ad.c {
                        let (yy, xx) = cross_position(vd.h, vd.w, y, x, j);
                        let a = attn.at(n, j, y, x);
                        let mut acc = 0.0;
                        for c in 0..vd.c {
                            let go = g.at(n, c, y, x);
                            let vo = v.offset(n, c, yy, xx);
                            acc += go * v.data()[vo];
                            dv.data_mut()[vo] += a * go;
                        }
                        da.set(n, j, y, x, acc);
                    }
                }
            }
        }
        Ok(vec![needs[0].then_some(da), needs[1].then_some(dv)])
    }
}

/// Softmax attention weights of one criss-cross pass, `(n, H+W-1, h, w)`.
pub fn gem_attention(s: &mut Session<'_>, f: Var, p: &DfcParams) -> Result<Var> {
    check_channels(s, f, p, "gem")?;
    let q = p.gem_q.forward(s, f)?;
    let k = p.gem_k.forward(s, f)?;
    let logits = cross_logits(s.graph.value(q), s.graph.value(k))?;
    let lv = s.graph.custom(&[q, k], logits, Box::new(CrossLogitsRule));
    s.graph.softmax(lv, 1)
}

/// One criss-cross attention pass with residual: `F + Σ softmax(K·Q) V`.
pub fn gem_single(s: &mut Session<'_>, f: Var, p: &DfcParams) -> Result<Var> {
    let attn = gem_attention(s, f, p)?;
    let v = p.gem_v.forward(s, f)?;
    let agg = cross_aggregate(s.graph.value(attn), s.graph.value(v))?;
    let out = s.graph.custom(&[attn, v], agg, Box::new(CrossAggregateRule));
    s.graph.add(f, out)
}

/// Two chained passes with shared projections.
pub fn gem(s: &mut Session<'_>, f: Var, p: &DfcParams) -> Result<Var> {
    let once = gem_single(s, f, p)?;
    gem_single(s, once, p)
}

/// `dem(F) ⊙ gem(F)`.
pub fn dfc(s: &mut Session<'_>, f: Var, p: &DfcParams) -> Result<Var> {
    let d = dem(s, f, p)?;
    let g = gem(s, f, p)?;
    s.graph.mul(d, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_covers_row_and_column_once() {
        let (h, w) = (3, 4);
        for y in 0..h {
            for x in 0..w {
                let mut seen: Vec<(usize, usize)> = (0..h + w - 1).map(|j| cross_position(h, w, y, x, j)).collect();
                seen.sort();
                seen.dedup();
                assert_eq!(seen.len(), h + w - 1);
                assert!(seen.iter().all(|&(yy, xx)| yy == y || xx == x));
                assert!(seen.contains(&(y, x)));
            }
        }
    }

    #[test]
    fn single_pixel_grid() {
        let q = Tensor::from_vec(vec![2.0]);
        let l = cross_logits(&q, &q).unwrap();
        assert_eq!(l.dims(), Dims::new(1, 1, 1, 1));
        assert_eq!(l.data(), &[4.0]);
    }
}
