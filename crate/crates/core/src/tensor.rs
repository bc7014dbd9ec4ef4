//! Dense rank-4 tensor in `(n, c, h, w)` row-major layout.

use std::fmt;

use crate::error::{Error, Result};

/// Axis names used in shape errors.
pub const AXIS_NAMES: [&str; 4] = ["batch", "channel", "height", "width"];

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_array(a: [usize; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Elements per batch image.
    pub const fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Row-major strides.
    pub const fn strides(&self) -> [usize; 4] {
        [self.c * self.h * self.w, self.h * self.w, self.w, 1]
    }
}

impl fmt::Debug for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl From<[usize; 4]> for Dims {
    fn from(a: [usize; 4]) -> Self {
        Self::from_array(a)
    }
}

/// Rank-4 array of `f64`. Gradient bookkeeping lives on the graph, not here.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    pub fn new(dims: impl Into<Dims>, data: Vec<f64>) -> Result<Self> {
        let dims = dims.into();
        if data.len() != dims.numel() {
            return Err(Error::shape(
                "tensor",
                "data",
                format!("{} values for dims {dims}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: impl Into<Dims>) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: impl Into<Dims>) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn full(dims: impl Into<Dims>, value: f64) -> Self {
        let dims = dims.into();
        Self {
            data: vec![value; dims.numel()],
            dims,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    /// Builds a tensor from a closure over `(n, c, h, w)` indices.
    pub fn from_fn(dims: impl Into<Dims>, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let dims = dims.into();
        let mut data = Vec::with_capacity(dims.numel());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for h in 0..dims.h {
                    for w in 0..dims.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self { dims, data }
    }

    /// A flat vector as a `1 x 1 x 1 x len` tensor.
    pub fn from_vec(data: Vec<f64>) -> Self {
        let dims = Dims::new(1, 1, 1, data.len());
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + h) * self.dims.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let o = self.offset(n, c, h, w);
        self.data[o] = value;
    }

    /// The contiguous slice holding batch image `n`.
    pub fn image(&self, n: usize) -> &[f64] {
        let len = self.dims.image_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn image_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.dims.image_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(&self, dims: impl Into<Dims>) -> Result<Self> {
        Self::new(dims, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_dims(other, op)?;
        Ok(Self {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.expect_same_dims(other, "axpy")?;
        for (d, &s) in self.data.iter_mut().zip(&other.data) {
            *d += alpha * s;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_dims(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Channels `start..start + len` of every image.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let d = self.dims;
        if start + len > d.c {
            return Err(Error::shape(
                "slice_channels",
                "channel",
                format!("range {start}..{} exceeds {} channels", start + len, d.c),
            ));
        }
        let plane = d.plane();
        let mut data = Vec::with_capacity(d.n * len * plane);
        for n in 0..d.n {
            let base = (n * d.c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Self {
            dims: Dims::new(d.n, len, d.h, d.w),
            data,
        })
    }

    /// Batch images `start..start + len`.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Self> {
        let d = self.dims;
        if start + len > d.n {
            return Err(Error::shape(
                "slice_batch",
                "batch",
                format!("range {start}..{} exceeds batch {}", start + len, d.n),
            ));
        }
        let il = d.image_len();
        Ok(Self {
            dims: Dims::new(len, d.c, d.h, d.w),
            data: self.data[start * il..(start + len) * il].to_vec(),
        })
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let (n, h, w) = (first.dims.n, first.dims.h, first.dims.w);
        for p in parts {
            for (axis, (a, b)) in [("batch", (p.dims.n, n)), ("height", (p.dims.h, h)), ("width", (p.dims.w, w))] {
                if a != b {
                    return Err(Error::shape("concat_channels", axis, format!("{a} vs {b}")));
                }
            }
        }
        let c: usize = parts.iter().map(|p| p.dims.c).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(p.image(i));
            }
        }
        Ok(Self {
            dims: Dims::new(n, c, h, w),
            data,
        })
    }

    /// Concatenates along the batch axis.
    pub fn concat_batch(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let d0 = first.dims;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if (p.dims.c, p.dims.h, p.dims.w) != (d0.c, d0.h, d0.w) {
                return Err(Error::shape("concat_batch", "channel", format!("{} vs {}", p.dims, d0)));
            }
            n += p.dims.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            dims: Dims::new(n, d0.c, d0.h, d0.w),
            data,
        })
    }

    pub(crate) fn expect_same_dims(&self, other: &Tensor, op: &'static str) -> Result<()> {
        let a = self.dims.as_array();
        let b = other.dims.as_array();
        for axis in 0..4 {
            if a[axis] != b[axis] {
                return Err(Error::shape(op, AXIS_NAMES[axis], format!("{} vs {}", self.dims, other.dims)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_length_must_match_dims() {
        assert!(Tensor::new([1, 2, 2, 2], vec![0.0; 7]).is_err());
        assert!(Tensor::new([1, 2, 2, 2], vec![0.0; 8]).is_ok());
    }

    #[test]
    fn channel_concat_then_slice_recovers_parts() {
        let a = Tensor::from_fn([2, 2, 2, 3], |n, c, h, w| (n * 100 + c * 10 + h * 3 + w) as f64);
        let b = Tensor::from_fn([2, 1, 2, 3], |n, _, h, w| -((n * 7 + h * 3 + w) as f64));
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.dims(), Dims::new(2, 3, 2, 3));
        assert_eq!(cat.slice_channels(0, 2).unwrap(), a);
        assert_eq!(cat.slice_channels(2, 1).unwrap(), b);
    }

    #[test]
    fn mismatch_names_axis() {
        let a = Tensor::zeros([1, 2, 3, 3]);
        let b = Tensor::zeros([1, 2, 3, 4]);
        match a.zip_map(&b, "add", |x, y| x + y) {
            Err(Error::Shape { axis, .. }) => assert_eq!(axis, "width"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
