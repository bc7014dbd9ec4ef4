//! Bilinear 2x upsampling, half-pixel-center convention.
//!
//! Output index `o` samples input coordinate `(o + 0.5) / 2 - 0.5`, clamped
//! to the valid range, so constants stay constant and values stay within the
//! input's min/max.

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

/// `(i0, i1, w0, w1)` taps for each output index along an axis of length `len`.
fn taps(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

fn check(d: Dims, op: &'static str) -> Result<()> {
    if d.h == 0 {
        return Err(Error::shape(op, "height", "empty input"));
    }
    if d.w == 0 {
        return Err(Error::shape(op, "width", "empty input"));
    }
    Ok(())
}

pub fn bilinear_upsample_x2(x: &Tensor) -> Result<Tensor> {
    let d = x.dims();
    check(d, "bilinear_upsample_x2")?;
    let (ty, tx) = (taps(d.h), taps(d.w));
    let od = Dims::new(d.n, d.c, 2 * d.h, 2 * d.w);
    let mut out = Tensor::zeros(od);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..d.n * d.c {
        let s = &src[plane * d.h * d.w..][..d.h * d.w];
        let o = &mut dst[plane * od.h * od.w..][..od.h * od.w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                o[oy * od.w + ox] = wy0 * (wx0 * s[y0 * d.w + x0] + wx1 * s[y0 * d.w + x1])
                    + wy1 * (wx0 * s[y1 * d.w + x0] + wx1 * s[y1 * d.w + x1]);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_upsample_x2`]; `input_dims` is the forward input shape.
pub fn bilinear_upsample_x2_backward(input_dims: Dims, dy: &Tensor) -> Result<Tensor> {
    let d = input_dims;
    check(d, "bilinear_upsample_x2_backward")?;
    let od = Dims::new(d.n, d.c, 2 * d.h, 2 * d.w);
    dy.expect_same_dims(&Tensor::zeros(od), "bilinear_upsample_x2_backward")?;
    let (ty, tx) = (taps(d.h), taps(d.w));
    let mut dx = Tensor::zeros(d);
    let g = dy.data();
    let out = dx.data_mut();
    for plane in 0..d.n * d.c {
        let gp = &g[plane * od.h * od.w..][..od.h * od.w];
        let op = &mut out[plane * d.h * d.w..][..d.h * d.w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = gp[oy * od.w + ox];
                op[y0 * d.w + x0] += wy0 * wx0 * v;
                op[y0 * d.w + x1] += wy0 * wx1 * v;
                op[y1 * d.w + x0] += wy1 * wx0 * v;
                op[y1 * d.w + x1] += wy1 * wx1 * v;
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar evaluation of the half-pixel rule, written independently.
    fn oracle(x: &Tensor, n: usize, c: usize, oy: usize, ox: usize) -> f64 {
        let d = x.dims();
        let sample = |coord: f64, len: usize| -> (usize, usize, f64) {
            let mut s = coord;
            if s < 0.0 {
                s = 0.0;
            }
            if s > (len - 1) as f64 {
                s = (len - 1) as f64;
            }
            let lo = s as usize;
            let hi = if lo + 1 < len { lo + 1 } else { lo };
            (lo, hi, s - lo as f64)
        };
        let (y0, y1, fy) = sample(oy as f64 / 2.0 - 0.25, d.h);
        let (x0, x1, fx) = sample(ox as f64 / 2.0 - 0.25, d.w);
        let top = x.at(n, c, y0, x0) * (1.0 - fx) + x.at(n, c, y0, x1) * fx;
        let bot = x.at(n, c, y1, x0) * (1.0 - fx) + x.at(n, c, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    #[test]
    fn constant_preserved() {
        let y = bilinear_upsample_x2(&Tensor::full([1, 1, 2, 2], 7.0)).unwrap();
        assert_eq!(y.dims(), Dims::new(1, 1, 4, 4));
        assert!(y.data().iter().all(|&v| (v - 7.0).abs() < 1e-15));
    }

    #[test]
    fn row_is_monotone() {
        let y = bilinear_upsample_x2(&Tensor::from_vec(vec![0.0, 1.0])).unwrap();
        assert_eq!(y.dims(), Dims::new(1, 1, 2, 4));
        let row = &y.data()[..4];
        assert!(row.windows(2).all(|p| p[0] <= p[1]), "{row:?}");
        assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn matches_scalar_oracle() {
        let x = Tensor::from_fn([1, 1, 3, 3], |_, _, h, w| ((h * 3 + w) as f64 * 1.7).sin());
        let y = bilinear_upsample_x2(&x).unwrap();
        let mut worst: f64 = 0.0;
        for oy in 0..6 {
            for ox in 0..6 {
                worst = worst.max((y.at(0, 0, oy, ox) - oracle(&x, 0, 0, oy, ox)).abs());
            }
        }
        assert!(worst < 1e-12);
    }

    #[test]
    fn backward_is_adjoint() {
        let x = Tensor::from_fn([2, 2, 3, 2], |n, c, h, w| ((n + 2 * c + 3 * h + 5 * w) as f64).cos());
        let g = Tensor::from_fn([2, 2, 6, 4], |n, c, h, w| ((n * 3 + c + h * 2 + w * 7) as f64).sin());
        let lhs: f64 = bilinear_upsample_x2(&x)
            .unwrap()
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a * b)
            .sum();
        let gx = bilinear_upsample_x2_backward(x.dims(), &g).unwrap();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
