//! Grouped 2-D convolution via im2col + GEMM.
//!
//! Weight layout is `(out_channels, in_channels / groups, kh, kw)`. With
//! `groups == in_channels` and one filter per group this is a depthwise
//! convolution; 1x1 kernels with `groups == 1` give a pointwise one.

use serde::{Deserialize, Serialize};

use super::gemm;
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self { stride, padding, groups }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
    stride: usize,
    pad: usize,
    /// Kernel rows / columns that reach the input for at least one output.
    ky: (usize, usize),
    kx: (usize, usize),
}

/// Half-open range of kernel taps that land inside `[0, len)` for some output.
fn live_taps(k: usize, len: usize, out: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub((out - 1) * stride);
    let hi = (len - 1 + pad).min(k - 1) + 1;
    (lo, hi.max(lo))
}

/// Outputs `o` in `[0, out)` whose input index `o * stride + k - pad` lies in `[0, len)`.
fn valid_outputs(k: usize, len: usize, out: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad <= k { 0 } else { (len + pad - k - 1) / stride + 1 };
    (lo.min(out), hi.min(out).max(lo.min(out)))
}

impl Geometry {
    fn new(input: Dims, weight: Dims, spec: Conv2dSpec) -> Result<Self> {
        const OP: &str = "conv2d";
        if spec.stride == 0 {
            return Err(Error::param(OP, "stride must be positive"));
        }
        if spec.groups == 0 {
            return Err(Error::param(OP, "groups must be positive"));
        }
        if !input.c.is_multiple_of(spec.groups) {
            return Err(Error::shape(
                OP,
                "channel",
                format!("{} input channels not divisible by {} groups", input.c, spec.groups),
            ));
        }
        if !weight.n.is_multiple_of(spec.groups) {
            return Err(Error::shape(
                OP,
                "batch",
                format!("{} output channels not divisible by {} groups", weight.n, spec.groups),
            ));
        }
        let cin_g = input.c / spec.groups;
        if weight.c != cin_g {
            return Err(Error::shape(
                OP,
                "channel",
                format!("kernel expects {} channels per group, input provides {cin_g}", weight.c),
            ));
        }
        let ph = input.h + 2 * spec.padding;
        let pw = input.w + 2 * spec.padding;
        if weight.h == 0 || weight.h > ph {
            return Err(Error::shape(
                OP,
                "height",
                format!("kernel {} vs padded input {ph}", weight.h),
            ));
        }
        if weight.w == 0 || weight.w > pw {
            return Err(Error::shape(OP, "width", format!("kernel {} vs padded input {pw}", weight.w)));
        }
        let oh = (ph - weight.h) / spec.stride + 1;
        let ow = (pw - weight.w) / spec.stride + 1;
        Ok(Self {
            ky: live_taps(weight.h, input.h, oh, spec.stride, spec.padding),
            kx: live_taps(weight.w, input.w, ow, spec.stride, spec.padding),
            n: input.n,
            h: input.h,
            w: input.w,
            cout: weight.n,
            kh: weight.h,
            kw: weight.w,
            oh,
            ow,
            groups: spec.groups,
            cin_g,
            cout_g: weight.n / spec.groups,
            stride: spec.stride,
            pad: spec.padding,
        })
    }

    fn out_dims(&self) -> Dims {
        Dims::new(self.n, self.cout, self.oh, self.ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn taps(&self) -> usize {
        (self.ky.1 - self.ky.0) * (self.kx.1 - self.kx.0)
    }

    fn col_rows(&self) -> usize {
        self.cin_g * self.taps()
    }

    fn cropped(&self) -> bool {
        self.taps() != self.kh * self.kw
    }

    /// The group's weights restricted to live taps, `cout_g x col_rows`.
    fn live_weights<'w>(&self, wdata: &'w [f64], group: usize) -> std::borrow::Cow<'w, [f64]> {
        let full = self.cin_g * self.kh * self.kw;
        let block = &wdata[group * self.cout_g * full..(group + 1) * self.cout_g * full];
        if !self.cropped() {
            return block.into();
        }
        let mut out = Vec::with_capacity(self.cout_g * self.col_rows());
        for co in 0..self.cout_g {
            for ci in 0..self.cin_g {
                let base = (co * self.cin_g + ci) * self.kh * self.kw;
                for ky in self.ky.0..self.ky.1 {
                    out.extend_from_slice(&block[base + ky * self.kw + self.kx.0..base + ky * self.kw + self.kx.1]);
                }
            }
        }
        out.into()
    }

    /// Adds a live-tap weight gradient into the full kernel gradient of `group`.
    fn scatter_weight_grad(&self, live: &[f64], group: usize, dw: &mut [f64]) {
        let full = self.cin_g * self.kh * self.kw;
        let block = &mut dw[group * self.cout_g * full..(group + 1) * self.cout_g * full];
        let kw_live = self.kx.1 - self.kx.0;
        let mut src = live.chunks_exact(kw_live);
        for co in 0..self.cout_g {
            for ci in 0..self.cin_g {
                let base = (co * self.cin_g + ci) * self.kh * self.kw;
                for ky in self.ky.0..self.ky.1 {
                    let row = src.next().expect("sizes match");
                    block[base + ky * self.kw + self.kx.0..base + ky * self.kw + self.kx.1].copy_from_slice(row);
                }
            }
        }
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds the channels of one group of one image into `col`, whose
    /// rows are `ld` apart; this image's columns start at `off`.
    fn im2col(&self, img: &[f64], group: usize, col: &mut [f64], ld: usize, off: usize) {
        let plane = self.h * self.w;
        let cols = self.col_cols();
        let mut row = 0;
        for ci in 0..self.cin_g {
            let chan = &img[(group * self.cin_g + ci) * plane..][..plane];
            for ky in self.ky.0..self.ky.1 {
                let (oy0, oy1) = valid_outputs(ky, self.h, self.oh, self.stride, self.pad);
                for kx in self.kx.0..self.kx.1 {
                    let (ox0, ox1) = valid_outputs(kx, self.w, self.ow, self.stride, self.pad);
                    let dst = &mut col[row * ld + off..][..cols];
                    dst[..oy0 * self.ow].fill(0.0);
                    dst[oy1 * self.ow..].fill(0.0);
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        line[..ox0].fill(0.0);
                        line[ox1..].fill(0.0);
                        if ox1 > ox0 {
                            let ix0 = ox0 * self.stride + kx - self.pad;
                            let src = &chan[iy * self.w..(iy + 1) * self.w];
                            if self.stride == 1 {
                                line[ox0..ox1].copy_from_slice(&src[ix0..ix0 + ox1 - ox0]);
                            } else {
                                for (j, v) in line[ox0..ox1].iter_mut().enumerate() {
                                    *v = src[ix0 + j * self.stride];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Folds `col` (laid out as in [`Self::im2col`]) back, accumulating into
    /// the group's channels of `img`.
    fn col2im(&self, col: &[f64], group: usize, img: &mut [f64], ld: usize, off: usize) {
        let plane = self.h * self.w;
        let cols = self.col_cols();
        let mut row = 0;
        for ci in 0..self.cin_g {
            let chan = &mut img[(group * self.cin_g + ci) * plane..][..plane];
            for ky in self.ky.0..self.ky.1 {
                let (oy0, oy1) = valid_outputs(ky, self.h, self.oh, self.stride, self.pad);
                for kx in self.kx.0..self.kx.1 {
                    let (ox0, ox1) = valid_outputs(kx, self.w, self.ow, self.stride, self.pad);
                    let src = &col[row * ld + off..][..cols];
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let line = &src[oy * self.ow..(oy + 1) * self.ow];
                        let dst = &mut chan[iy * self.w..(iy + 1) * self.w];
                        for ox in ox0..ox1 {
                            dst[ox * self.stride + kx - self.pad] += line[ox];
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// The group's unfolded input for the whole batch: `col_rows x (n * col_cols)`.
    fn batch_columns(&self, input: &Tensor, group: usize, col: &mut [f64]) {
        let cols = self.col_cols();
        let ld = self.n * cols;
        for n in 0..self.n {
            let img = input.image(n);
            if self.is_pointwise() {
                for r in 0..self.cin_g {
                    col[r * ld + n * cols..][..cols].copy_from_slice(&img[(group * self.cin_g + r) * cols..][..cols]);
                }
            } else {
                self.im2col(img, group, col, ld, n * cols);
            }
        }
    }
}

/// Copies `rows` channel planes of `plane` values starting at channel
/// `first` of every image into a `rows x (n * plane)` matrix.
fn gather_channels(data: &[f64], n: usize, img_len: usize, first: usize, rows: usize, plane: usize, dst: &mut [f64]) {
    let ld = n * plane;
    for i in 0..n {
        for r in 0..rows {
            dst[r * ld + i * plane..][..plane].copy_from_slice(&data[i * img_len + (first + r) * plane..][..plane]);
        }
    }
}

/// Inverse of [`gather_channels`].
fn scatter_channels(src: &[f64], n: usize, img_len: usize, first: usize, rows: usize, plane: usize, data: &mut [f64]) {
    let ld = n * plane;
    for i in 0..n {
        for r in 0..rows {
            data[i * img_len + (first + r) * plane..][..plane].copy_from_slice(&src[r * ld + i * plane..][..plane]);
        }
    }
}

fn check_bias(bias: Option<&Tensor>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::shape(
                "conv2d",
                "channel",
                format!("bias has {} values for {cout} output channels", b.numel()),
            ));
        }
    }
    Ok(())
}

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
    let g = Geometry::new(input.dims(), weight.dims(), spec)?;
    check_bias(bias, g.cout)?;
    let mut out = Tensor::zeros(g.out_dims());
    let rows = g.col_rows();
    let cols = g.col_cols();
    let wide = g.n * cols;
    let mut col = vec![0.0; rows * wide];
    let mut y = vec![0.0; g.cout_g * wide];
    let wdata = weight.data();
    let out_img_len = g.cout * cols;
    for grp in 0..g.groups {
        g.batch_columns(input, grp, &mut col);
        let w_mat = g.live_weights(wdata, grp);
        gemm(g.cout_g, rows, wide, &w_mat, false, &col, false, &mut y, 0.0);
        scatter_channels(&y, g.n, out_img_len, grp * g.cout_g, g.cout_g, cols, out.data_mut());
    }
    if let Some(b) = bias {
        for n in 0..g.n {
            let out_img = out.image_mut(n);
            for (co, &bv) in b.data().iter().enumerate() {
                out_img[co * cols..(co + 1) * cols].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct Conv2dGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Gradients of [`conv2d`] given the upstream gradient `grad_out`.
///
/// `bias_dims` is the shape of the bias tensor when one was used.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias_dims: Option<Dims>,
    spec: Conv2dSpec,
    grad_out: &Tensor,
    need_input: bool,
    need_weight: bool,
) -> Result<Conv2dGrads> {
    let g = Geometry::new(input.dims(), weight.dims(), spec)?;
    grad_out.expect_same_dims(&Tensor::zeros(g.out_dims()), "conv2d_backward")?;
    let rows = g.col_rows();
    let cols = g.col_cols();
    let mut grad_in = need_input.then(|| Tensor::zeros(input.dims()));
    let mut grad_w = need_weight.then(|| Tensor::zeros(weight.dims()));
    let wide = g.n * cols;
    let mut col = vec![0.0; rows * wide];
    let mut dy = vec![0.0; g.cout_g * wide];
    let wdata = weight.data();
    let out_img_len = g.cout * cols;
    let in_img_len = input.dims().image_len();
    for grp in 0..g.groups {
        gather_channels(grad_out.data(), g.n, out_img_len, grp * g.cout_g, g.cout_g, cols, &mut dy);
        if let Some(gw) = grad_w.as_mut() {
            g.batch_columns(input, grp, &mut col);
            // dW = dY · colᵀ
            if g.cropped() {
                let mut live = vec![0.0; g.cout_g * rows];
                gemm(g.cout_g, wide, rows, &dy, false, &col, true, &mut live, 0.0);
                g.scatter_weight_grad(&live, grp, gw.data_mut());
            } else {
                let dw = &mut gw.data_mut()[grp * g.cout_g * rows..(grp + 1) * g.cout_g * rows];
                gemm(g.cout_g, wide, rows, &dy, false, &col, true, dw, 0.0);
            }
        }
        if let Some(gi) = grad_in.as_mut() {
            let w_mat = g.live_weights(wdata, grp);
            // dcol = Wᵀ · dY
            gemm(rows, g.cout_g, wide, &w_mat, true, &dy, false, &mut col, 0.0);
            if g.is_pointwise() {
                scatter_channels(&col, g.n, in_img_len, grp * g.cin_g, g.cin_g, cols, gi.data_mut());
            } else {
                for n in 0..g.n {
                    g.col2im(&col, grp, gi.image_mut(n), wide, n * cols);
                }
            }
        }
    }
    let grad_b = bias_dims.map(|bd| {
        let mut gb = Tensor::zeros(bd);
        for n in 0..g.n {
            let gout = &grad_out.data()[n * out_img_len..(n + 1) * out_img_len];
            for (co, v) in gb.data_mut().iter_mut().enumerate() {
                *v += gout[co * cols..(co + 1) * cols].iter().sum::<f64>();
            }
        }
        gb
    });
    Ok(Conv2dGrads {
        input: grad_in,
        weight: grad_w,
        bias: grad_b,
    })
}
