//! Histogram entropy and mutual information (in bits), plus the MI
//! difference loss between pre- and post-noise bi-temporal features.
//!
//! Hard mode bins each sample into one of `bins` uniform cells. Soft mode
//! spreads each sample linearly between the two nearest bin centers
//! (a triangular kernel one bin wide), which makes the estimate
//! differentiable in the samples and in the data-derived range.

use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistogramMode {
    Hard,
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramMi {
    pub bins: usize,
    /// Fixed `(lo, hi)`; `None` uses the joint min/max of the samples compared.
    pub range: Option<(f64, f64)>,
    pub mode: HistogramMode,
}

impl HistogramMi {
    pub fn new(bins: usize, mode: HistogramMode) -> Result<Self> {
        let h = Self { bins, range: None, mode };
        h.validate()?;
        Ok(h)
    }

    pub fn hard(bins: usize) -> Result<Self> {
        Self::new(bins, HistogramMode::Hard)
    }

    pub fn soft(bins: usize) -> Result<Self> {
        Self::new(bins, HistogramMode::Soft)
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Result<Self> {
        self.range = Some((lo, hi));
        self.validate()?;
        Ok(self)
    }

    pub fn with_mode(mut self, mode: HistogramMode) -> Self {
        self.mode = mode;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::param("histogram", format!("need at least 2 bins, got {}", self.bins)));
        }
        if let Some((lo, hi)) = self.range {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::param("histogram", format!("invalid range ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    fn resolve_range(&self, sets: &[&[f64]]) -> (f64, f64) {
        self.range.unwrap_or_else(|| {
            let it = sets.iter().flat_map(|s| s.iter().copied());
            let lo = it.clone().fold(f64::INFINITY, f64::min);
            let hi = it.fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        })
    }
}

/// Where one sample lands: up to two `(bin, weight)` pairs.
#[derive(Clone, Copy, Debug)]
struct Assign {
    lo_bin: usize,
    frac: f64,
    /// Position lies strictly inside the interpolation range (nonzero derivative).
    active: bool,
}

impl Assign {
    #[inline]
    fn weights(&self) -> [(usize, f64); 2] {
        [(self.lo_bin, 1.0 - self.frac), (self.lo_bin + 1, self.frac)]
    }
}

struct Binner {
    lo: f64,
    hi: f64,
    bins: usize,
    mode: HistogramMode,
}

impl Binner {
    fn degenerate(&self) -> bool {
        !(self.hi > self.lo)
    }

    fn position(&self, x: f64) -> f64 {
        (x - self.lo) / (self.hi - self.lo) * self.bins as f64
    }

    fn assign(&self, x: f64) -> Assign {
        if self.degenerate() {
            return Assign {
                lo_bin: 0,
                frac: 0.0,
                active: false,
            };
        }
        let last = (self.bins - 1) as f64;
        match self.mode {
            HistogramMode::Hard => {
                let p = self.position(x).floor().clamp(0.0, last);
                // Hard bins put all mass on `lo_bin`; `frac` stays 0.
                Assign {
                    lo_bin: p as usize,
                    frac: 0.0,
                    active: false,
                }
            }
            HistogramMode::Soft => {
                let u = self.position(x) - 0.5;
                let active = u > 0.0 && u < last;
                let u = u.clamp(0.0, last);
                let f = u.floor().min(last - 1.0);
                Assign {
                    lo_bin: f as usize,
                    frac: u - f,
                    active,
                }
            }
        }
    }
}

/// Bin weights one past the last bin only ever carry zero mass; the tables
/// keep one spare row and column so that needs no special casing.
fn joint_table(a: &[Assign], b: &[Assign], bins: usize) -> Vec<f64> {
    let stride = bins + 1;
    let mut p = vec![0.0; stride * stride];
    for (sa, sb) in a.iter().zip(b) {
        for (i, wi) in sa.weights() {
            if wi == 0.0 {
                continue;
            }
            for (j, wj) in sb.weights() {
                p[i * stride + j] += wi * wj;
            }
        }
    }
    let n = a.len() as f64;
    p.iter_mut().for_each(|v| *v /= n);
    p
}

fn plogp_bits(p: f64) -> f64 {
    if p > 0.0 {
        p * p.log2()
    } else {
        0.0
    }
}

/// Shannon entropy in bits of a probability vector; empty bins contribute 0.
pub fn entropy_of(probs: &[f64]) -> f64 {
    -probs.iter().map(|&p| plogp_bits(p)).sum::<f64>()
}

fn check_samples(samples: &[f64], op: &'static str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::shape(op, "data", "no samples"));
    }
    if let Some(v) = samples.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{op}: non-finite sample {v}")));
    }
    Ok(())
}

/// Marginal bin probabilities of one sample set.
pub fn histogram(samples: &[f64], cfg: &HistogramMi) -> Result<Vec<f64>> {
    check_samples(samples, "histogram")?;
    let (lo, hi) = cfg.resolve_range(&[samples]);
    let binner = Binner {
        lo,
        hi,
        bins: cfg.bins,
        mode: cfg.mode,
    };
    let mut p = vec![0.0; cfg.bins + 1];
    for &x in samples {
        for (i, w) in binner.assign(x).weights() {
            p[i] += w;
        }
    }
    p.truncate(cfg.bins);
    let n = samples.len() as f64;
    p.iter_mut().for_each(|v| *v /= n);
    Ok(p)
}

/// Joint bin probabilities as a row-major `bins x bins` table.
pub fn joint_histogram(a: &[f64], b: &[f64], cfg: &HistogramMi) -> Result<Vec<f64>> {
    let (table, _) = joint_parts(a, b, cfg)?;
    Ok(table)
}

fn joint_parts(a: &[f64], b: &[f64], cfg: &HistogramMi) -> Result<(Vec<f64>, Binner)> {
    check_samples(a, "mutual_information")?;
    check_samples(b, "mutual_information")?;
    if a.len() != b.len() {
        return Err(Error::shape(
            "mutual_information",
            "data",
            format!("{} vs {} samples", a.len(), b.len()),
        ));
    }
    let (lo, hi) = cfg.resolve_range(&[a, b]);
    let binner = Binner {
        lo,
        hi,
        bins: cfg.bins,
        mode: cfg.mode,
    };
    let sa: Vec<Assign> = a.iter().map(|&x| binner.assign(x)).collect();
    let sb: Vec<Assign> = b.iter().map(|&x| binner.assign(x)).collect();
    let full = joint_table(&sa, &sb, cfg.bins);
    let stride = cfg.bins + 1;
    let table = (0..cfg.bins)
        .flat_map(|i| full[i * stride..i * stride + cfg.bins].to_vec())
        .collect();
    Ok((table, binner))
}

pub fn entropy(samples: &[f64], cfg: &HistogramMi) -> Result<f64> {
    Ok(entropy_of(&histogram(samples, cfg)?))
}

fn marginals(table: &[f64], bins: usize) -> (Vec<f64>, Vec<f64>) {
    let mut pa = vec![0.0; bins];
    let mut pb = vec![0.0; bins];
    for i in 0..bins {
        for j in 0..bins {
            let p = table[i * bins + j];
            pa[i] += p;
            pb[j] += p;
        }
    }
    (pa, pb)
}

/// `I(A; B) = H(A) + H(B) - H(A, B)` with both variables binned over one shared range.
pub fn mutual_information(a: &[f64], b: &[f64], cfg: &HistogramMi) -> Result<f64> {
    let (table, _) = joint_parts(a, b, cfg)?;
    let (pa, pb) = marginals(&table, cfg.bins);
    Ok(entropy_of(&pa) + entropy_of(&pb) - entropy_of(&table))
}

/// The piecewise loss: `I_former - I_latter` when mutual information dropped, else 0.
pub fn mi_difference(i_former: f64, i_latter: f64) -> f64 {
    if i_latter - i_former < 0.0 {
        i_former - i_latter
    } else {
        0.0
    }
}

/// MI difference loss over four equally sized sample sets, evaluated with `cfg`.
pub fn mi_loss(fa: &[f64], fb: &[f64], fa_noisy: &[f64], fb_noisy: &[f64], cfg: &HistogramMi) -> Result<f64> {
    if fa.len() != fa_noisy.len() {
        return Err(Error::shape(
            "mi_loss",
            "data",
            format!("{} vs {} samples", fa.len(), fa_noisy.len()),
        ));
    }
    let former = mutual_information(fa, fb, cfg)?;
    let latter = mutual_information(fa_noisy, fb_noisy, cfg)?;
    Ok(mi_difference(former, latter))
}

/// Value and gradient of soft MI for one pair of sample sets.
type SampleGrads = (Vec<f64>, Vec<f64>);

fn soft_mi_with_grad(a: &[f64], b: &[f64], cfg: &HistogramMi, want_grad: bool) -> Result<(f64, Option<SampleGrads>)> {
    let soft = cfg.with_mode(HistogramMode::Soft);
    check_samples(a, "soft_mutual_information")?;
    check_samples(b, "soft_mutual_information")?;
    let (lo, hi) = soft.resolve_range(&[a, b]);
    let binner = Binner {
        lo,
        hi,
        bins: soft.bins,
        mode: HistogramMode::Soft,
    };
    let bins = soft.bins;
    let stride = bins + 1;
    let sa: Vec<Assign> = a.iter().map(|&x| binner.assign(x)).collect();
    let sb: Vec<Assign> = b.iter().map(|&x| binner.assign(x)).collect();
    let p = joint_table(&sa, &sb, bins);
    let mut pa = vec![0.0; stride];
    let mut pb = vec![0.0; stride];
    for i in 0..stride {
        for j in 0..stride {
            pa[i] += p[i * stride + j];
            pb[j] += p[i * stride + j];
        }
    }
    let mi = entropy_of(&pa) + entropy_of(&pb) - entropy_of(&p);
    if !want_grad || binner.degenerate() {
        let zeros = want_grad.then(|| (vec![0.0; a.len()], vec![0.0; b.len()]));
        return Ok((mi, zeros));
    }

    // dI/dP_ij for occupied cells; the constant term keeps the partials exact
    // even though it cancels because the table always sums to one.
    let inv_ln2 = std::f64::consts::LOG2_E;
    let mut gp = vec![0.0; stride * stride];
    for i in 0..stride {
        for j in 0..stride {
            let v = p[i * stride + j];
            if v > 0.0 {
                gp[i * stride + j] = (v / (pa[i] * pb[j])).log2() - inv_ln2;
            }
        }
    }
    let n = a.len() as f64;
    let scale = bins as f64 / (hi - lo);
    let range_sq = (hi - lo) * (hi - lo);
    let (mut d_lo, mut d_hi) = (0.0, 0.0);
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for k in 0..a.len() {
        let (ak, bk) = (sa[k], sb[k]);
        if ak.active {
            let f = ak.lo_bin;
            let du: f64 = bk
                .weights()
                .iter()
                .map(|&(j, wj)| wj * (gp[(f + 1) * stride + j] - gp[f * stride + j]))
                .sum::<f64>()
                / n;
            ga[k] = du * scale;
            d_lo += du * bins as f64 * (a[k] - hi) / range_sq;
            d_hi -= du * bins as f64 * (a[k] - lo) / range_sq;
        }
        if bk.active {
            let f = bk.lo_bin;
            let du: f64 = ak
                .weights()
                .iter()
                .map(|&(i, wi)| wi * (gp[i * stride + f + 1] - gp[i * stride + f]))
                .sum::<f64>()
                / n;
            gb[k] = du * scale;
            d_lo += du * bins as f64 * (b[k] - hi) / range_sq;
            d_hi -= du * bins as f64 * (b[k] - lo) / range_sq;
        }
    }
    if soft.range.is_none() {
        // lo / hi are the joint min / max: route their gradients to the
        // first sample attaining them.
        let locate = |target: f64| -> (bool, usize) {
            if let Some(i) = a.iter().position(|&v| v == target) {
                (true, i)
            } else {
                (
                    false,
                    b.iter().position(|&v| v == target).expect("extremum comes from the data"),
                )
            }
        };
        for (target, d) in [(lo, d_lo), (hi, d_hi)] {
            match locate(target) {
                (true, i) => ga[i] += d,
                (false, i) => gb[i] += d,
            }
        }
    }
    Ok((mi, Some((ga, gb))))
}

/// Soft-histogram mutual information of one pair of sample sets.
pub fn soft_mutual_information(a: &[f64], b: &[f64], cfg: &HistogramMi) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "soft_mutual_information",
            "data",
            format!("{} vs {}", a.len(), b.len()),
        ));
    }
    Ok(soft_mi_with_grad(a, b, cfg, false)?.0)
}

struct SoftMiRule {
    cfg: HistogramMi,
}

impl Backward for SoftMiRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let n = a.dims().n;
        let mut da = Tensor::zeros(a.dims());
        let mut db = Tensor::zeros(b.dims());
        for i in 0..n {
            let (_, grads) = soft_mi_with_grad(a.image(i), b.image(i), &self.cfg, true)?;
            let (ga, gb) = grads.expect("gradient requested");
            let up = g.data()[i];
            for (d, v) in da.image_mut(i).iter_mut().zip(ga) {
                *d = up * v;
            }
            for (d, v) in db.image_mut(i).iter_mut().zip(gb) {
                *d = up * v;
            }
        }
        Ok(vec![needs[0].then_some(da), needs[1].then_some(db)])
    }
}

/// Differentiable per-image soft MI: for `(n, c, h, w)` inputs returns an
/// `(n, 1, 1, 1)` node whose entry `i` is `I(a_i; b_i)` over all values of
/// image `i`.
pub fn soft_mi_per_image(g: &mut Graph, a: Var, b: Var, cfg: &HistogramMi) -> Result<Var> {
    let (av, bv) = (g.value(a), g.value(b));
    av.expect_same_dims(bv, "soft_mi_per_image")?;
    let n = av.dims().n;
    let mut vals = Vec::with_capacity(n);
    for i in 0..n {
        vals.push(soft_mi_with_grad(av.image(i), bv.image(i), cfg, false)?.0);
    }
    let value = Tensor::new(Dims::new(n, 1, 1, 1), vals)?;
    Ok(g.custom(&[a, b], value, Box::new(SoftMiRule { cfg: *cfg })))
}

/// Training-mode MI difference loss, averaged over the batch:
/// `mean_i relu(I(A_i; B_i) - I(A'_i; B'_i))` with soft histograms.
pub fn mi_loss_var(g: &mut Graph, fa: Var, fb: Var, fa_noisy: Var, fb_noisy: Var, cfg: &HistogramMi) -> Result<Var> {
    g.value(fa).expect_same_dims(g.value(fa_noisy), "mi_loss")?;
    let former = soft_mi_per_image(g, fa, fb, cfg)?;
    let latter = soft_mi_per_image(g, fa_noisy, fb_noisy, cfg)?;
    let diff = g.sub(former, latter)?;
    let hinge = g.relu(diff);
    Ok(g.mean(hinge))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_four_bins_is_two_bits() {
        let cfg = HistogramMi::hard(4).unwrap();
        assert_eq!(entropy(&[0.0, 1.0, 2.0, 3.0], &cfg).unwrap(), 2.0);
    }

    #[test]
    fn constant_samples_have_zero_entropy() {
        let cfg = HistogramMi::hard(8).unwrap();
        assert_eq!(entropy(&[4.2; 10], &cfg).unwrap(), 0.0);
        assert_eq!(mutual_information(&[4.2; 10], &[1.0; 10], &cfg).unwrap(), 0.0);
    }

    #[test]
    fn half_quarter_quarter() {
        assert!((entropy_of(&[0.5, 0.25, 0.25]) - 1.5).abs() < 1e-15);
        let cfg = HistogramMi::hard(3).unwrap().with_range(0.0, 3.0).unwrap();
        assert!((entropy(&[0.5, 0.5, 1.5, 2.5], &cfg).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn product_joint_has_zero_information() {
        let cfg = HistogramMi::hard(2).unwrap();
        let a = [0.0, 0.0, 1.0, 1.0];
        let b = [0.0, 1.0, 0.0, 1.0];
        assert!(mutual_information(&a, &b, &cfg).unwrap().abs() < 1e-9);
    }

    #[test]
    fn self_information_is_entropy() {
        let cfg = HistogramMi::hard(16).unwrap();
        let t: Vec<f64> = (0..500).map(|i| ((i as f64) * 0.37).sin()).collect();
        let i = mutual_information(&t, &t, &cfg).unwrap();
        assert!((i - entropy(&t, &cfg).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn size_mismatch_is_shape_error() {
        let cfg = HistogramMi::hard(4).unwrap();
        assert!(matches!(
            mutual_information(&[1.0, 2.0], &[1.0], &cfg),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn bins_and_range_validated() {
        assert!(HistogramMi::hard(1).is_err());
        assert!(HistogramMi::hard(4).unwrap().with_range(1.0, 1.0).is_err());
    }

    #[test]
    fn out_of_range_samples_clamp_to_edges() {
        let cfg = HistogramMi::hard(4).unwrap().with_range(0.0, 4.0).unwrap();
        let p = histogram(&[-10.0, 10.0, 1.5, 2.5], &cfg).unwrap();
        assert_eq!(p, vec![0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn loss_branches() {
        assert!((mi_difference(1.0, 0.4) - 0.6).abs() < 1e-15);
        assert_eq!(mi_difference(0.4, 1.0), 0.0);
        assert_eq!(mi_difference(0.7, 0.7), 0.0);
    }

    #[test]
    fn soft_histogram_sums_to_one() {
        let cfg = HistogramMi::soft(8).unwrap();
        let t: Vec<f64> = (0..97).map(|i| ((i as f64) * 1.3).cos()).collect();
        let p = histogram(&t, &cfg).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
