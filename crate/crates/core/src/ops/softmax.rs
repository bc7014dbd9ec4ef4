use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(outer, len, inner)` decomposition of `axis`.
fn split(t: &Tensor, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= 4 {
        return Err(Error::shape(op, "axis", format!("axis {axis} out of range for rank 4")));
    }
    let d = t.dims().as_array();
    let outer: usize = d[..axis].iter().product();
    let inner: usize = d[axis + 1..].iter().product();
    Ok((outer, d[axis], inner))
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = split(x, axis, "softmax_axis")?;
    let mut out = x.clone();
    let src = x.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let m = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (src[at(j)] - m).exp();
                dst[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                dst[at(j)] /= total;
            }
        }
    }
    Ok(out)
}

/// Given the softmax output `y` and upstream `dy`: `dx = y ⊙ (dy − Σ dy·y)`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Result<Tensor> {
    y.expect_same_dims(dy, "softmax_backward")?;
    let (outer, len, inner) = split(y, axis, "softmax_backward")?;
    let mut dx = Tensor::zeros(y.dims());
    let (yd, gd) = (y.data(), dy.data());
    let out = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: f64 = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..len {
                out[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let y = softmax_axis(&Tensor::from_vec(vec![0.0; 3]), 3).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn large_logit_does_not_overflow() {
        let y = softmax_axis(&Tensor::from_vec(vec![1000.0, 0.0]), 3).unwrap();
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-15);
        assert!(y.data()[1] < 1e-300);
    }

    #[test]
    fn hand_computed_values() {
        let y = softmax_axis(&Tensor::from_vec(vec![1.0, 2.0, 3.0]), 3).unwrap();
        for (v, e) in y.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((v - e).abs() < 1e-5);
        }
    }

    #[test]
    fn sums_to_one_along_every_axis() {
        let x = Tensor::from_fn([2, 3, 4, 5], |n, c, h, w| ((n * 7 + c * 5 + h * 3 + w) as f64).sin() * 20.0);
        for axis in 0..4 {
            let y = softmax_axis(&x, axis).unwrap();
            let d = y.dims().as_array();
            let inner: usize = d[axis + 1..].iter().product();
            let outer: usize = d[..axis].iter().product();
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..d[axis]).map(|j| y.data()[(o * d[axis] + j) * inner + i]).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn axis_out_of_range() {
        assert!(matches!(
            softmax_axis(&Tensor::zeros([1, 1, 1, 2]), 4),
            Err(Error::Shape { .. })
        ));
    }
}
