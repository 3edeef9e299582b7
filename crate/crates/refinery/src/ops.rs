//! Differentiable primitive operations.
//!
//! Each op has a pure forward kernel, a backward kernel that accumulates into
//! caller-provided buffers, and a recording method on [`Tape`]. Conventions:
//!
//! - Convolution is cross-correlation (no kernel flip) with zero padding.
//! - Max pooling pads with -inf (padding is never selected over real data)
//!   and routes gradient to the first maximum in row-major window order.
//! - Bilinear resizing uses half-pixel centers, `s = (d + 0.5) * in/out - 0.5`,
//!   clamped to `[0, in-1]`; the backward pass is the exact adjoint.
//! - ReLU uses subgradient 0 at 0.
//!
//! The forward kernels here use a patch-matrix lowering for convolution; the
//! naive nested-loop reference lives in the test suite and the two must agree
//! within 1e-6.

use crate::error::{Error, Result};
use crate::tape::{OpRecord, Tape, ValueId};
use crate::tensor::{MaskTensor, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub has_bias: bool,
}

impl ConvSpec {
    /// 3x3, stride 1, pad 1: the workhorse of every refinement component.
    pub fn k3(in_channels: usize, out_channels: usize, has_bias: bool) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (1, 1),
            has_bias,
        }
    }

    /// 1x1 convolution (projection / classifier head).
    pub fn k1(in_channels: usize, out_channels: usize, stride: usize, has_bias: bool) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (1, 1),
            stride: (stride, stride),
            padding: (0, 0),
            has_bias,
        }
    }

    /// 3x3 with the given stride, pad 1.
    pub fn k3s(in_channels: usize, out_channels: usize, stride: usize, has_bias: bool) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (3, 3),
            stride: (stride, stride),
            padding: (1, 1),
            has_bias,
        }
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
        )
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }

    /// Output spatial size: floor((size + 2*pad - kernel)/stride) + 1.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if h + 2 * ph < kh {
            return Err(Error::shape(
                "conv2d",
                format!("padded height {} smaller than kernel height {kh}", h + 2 * ph),
            ));
        }
        if w + 2 * pw < kw {
            return Err(Error::shape(
                "conv2d",
                format!("padded width {} smaller than kernel width {kw}", w + 2 * pw),
            ));
        }
        Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }

    pub fn param_count(&self) -> usize {
        let w = self.out_channels * self.in_channels * self.kernel.0 * self.kernel.1;
        if self.has_bias {
            w + self.out_channels
        } else {
            w
        }
    }
}

/// Valid output coordinate range [lo, hi) for one kernel offset: the output
/// positions whose source coordinate `o*stride + k - pad` lies inside the
/// input.
fn valid_out_range(k: usize, pad: usize, stride: usize, in_size: usize, out_size: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if in_size + pad > k {
        ((in_size + pad - k - 1) / stride + 1).min(out_size)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Gather one batch item into a (c*kh*kw) x (oh*ow) patch matrix, zero-padded.
#[allow(clippy::too_many_arguments)]
fn im2col(
    xd: &[f64],
    xs: Shape,
    n: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    patches: &mut [f64],
) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let p = oh * ow;
    patches.fill(0.0);
    for ci in 0..xs.c {
        let plane = &xd[(n * xs.c + ci) * xs.h * xs.w..(n * xs.c + ci + 1) * xs.h * xs.w];
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_out_range(ky, ph, sh, xs.h, oh);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = valid_out_range(kx, pw, sw, xs.w, ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                let r = (ci * kh + ky) * kw + kx;
                let prow = &mut patches[r * p..(r + 1) * p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * sh + ky - ph;
                    let dst = &mut prow[oy * ow + ox_lo..oy * ow + ox_hi];
                    if sw == 1 {
                        let ix0 = ox_lo + kx - pw;
                        dst.copy_from_slice(&plane[iy * xs.w + ix0..iy * xs.w + ix0 + dst.len()]);
                    } else {
                        for (j, d) in dst.iter_mut().enumerate() {
                            let ix = (ox_lo + j) * sw + kx - pw;
                            *d = plane[iy * xs.w + ix];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto the input plane layout.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    gpatches: &[f64],
    xs: Shape,
    n: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    gx: &mut [f64],
) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let p = oh * ow;
    for ci in 0..xs.c {
        let base = (n * xs.c + ci) * xs.h * xs.w;
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_out_range(ky, ph, sh, xs.h, oh);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = valid_out_range(kx, pw, sw, xs.w, ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                let r = (ci * kh + ky) * kw + kx;
                let prow = &gpatches[r * p..(r + 1) * p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * sh + ky - ph;
                    let src = &prow[oy * ow + ox_lo..oy * ow + ox_hi];
                    if sw == 1 {
                        let ix0 = ox_lo + kx - pw;
                        let dst = &mut gx[base + iy * xs.w + ix0..base + iy * xs.w + ix0 + src.len()];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    } else {
                        for (j, s) in src.iter().enumerate() {
                            let ix = (ox_lo + j) * sw + kx - pw;
                            gx[base + iy * xs.w + ix] += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let xs = x.shape();
    let (oh, ow) = spec.output_hw(xs.h, xs.w)?;
    let cout = spec.out_channels;
    let kdim = spec.in_channels * spec.kernel.0 * spec.kernel.1;
    let p = oh * ow;
    let mut out = Tensor::zeros(Shape::new(xs.n, cout, oh, ow));
    let mut patches = vec![0.0f64; kdim * p];
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for n in 0..xs.n {
        im2col(xd, xs, n, spec, oh, ow, &mut patches);
        let on = &mut od[n * cout * p..(n + 1) * cout * p];
        for co in 0..cout {
            let orow = &mut on[co * p..(co + 1) * p];
            let wrow = &wd[co * kdim..(co + 1) * kdim];
            for (r, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let prow = &patches[r * p..(r + 1) * p];
                for (o, pv) in orow.iter_mut().zip(prow) {
                    *o += wv * pv;
                }
            }
            if let Some(bias) = b {
                let bv = bias.data()[co];
                if bv != 0.0 {
                    for o in orow.iter_mut() {
                        *o += bv;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) struct ConvGrads<'a> {
    pub gx: Option<&'a mut [f64]>,
    pub gw: Option<&'a mut [f64]>,
    pub gb: Option<&'a mut [f64]>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    gout: &[f64],
    grads: ConvGrads<'_>,
) {
    let xs = x.shape();
    let (oh, ow) = spec.output_hw(xs.h, xs.w).expect("validated in forward");
    let cout = spec.out_channels;
    let kdim = spec.in_channels * spec.kernel.0 * spec.kernel.1;
    let p = oh * ow;
    let xd = x.data();
    let wd = w.data();
    let ConvGrads { mut gx, mut gw, mut gb } = grads;
    let mut patches = if gw.is_some() {
        vec![0.0f64; kdim * p]
    } else {
        Vec::new()
    };
    let mut gpatches = if gx.is_some() {
        vec![0.0f64; kdim * p]
    } else {
        Vec::new()
    };
    for n in 0..xs.n {
        let gn = &gout[n * cout * p..(n + 1) * cout * p];
        if let Some(gw) = gw.as_deref_mut() {
            im2col(xd, xs, n, spec, oh, ow, &mut patches);
            for co in 0..cout {
                let grow = &gn[co * p..(co + 1) * p];
                let gwrow = &mut gw[co * kdim..(co + 1) * kdim];
                for (r, gwv) in gwrow.iter_mut().enumerate() {
                    let prow = &patches[r * p..(r + 1) * p];
                    let mut acc = 0.0;
                    for (g, pv) in grow.iter().zip(prow) {
                        acc += g * pv;
                    }
                    *gwv += acc;
                }
            }
        }
        if let Some(gb) = gb.as_deref_mut() {
            for co in 0..cout {
                let grow = &gn[co * p..(co + 1) * p];
                gb[co] += grow.iter().sum::<f64>();
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            gpatches.fill(0.0);
            for co in 0..cout {
                let grow = &gn[co * p..(co + 1) * p];
                let wrow = &wd[co * kdim..(co + 1) * kdim];
                for (r, &wv) in wrow.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    let gprow = &mut gpatches[r * p..(r + 1) * p];
                    for (gp, g) in gprow.iter_mut().zip(grow) {
                        *gp += wv * g;
                    }
                }
            }
            col2im_add(&gpatches, xs, n, spec, oh, ow, gx);
        }
    }
}

/// Forward max pooling. Returns the output and, per output element, the flat
/// index of the selected input element (first maximum in row-major window
/// order).
pub(crate) fn maxpool2d_forward(
    x: &Tensor,
    window: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<(Tensor, Vec<usize>)> {
    let xs = x.shape();
    let (kh, kw) = window;
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
        return Err(Error::shape("maxpool2d", "window and stride must be positive".into()));
    }
    if xs.h + 2 * ph < kh || xs.w + 2 * pw < kw {
        return Err(Error::shape(
            "maxpool2d",
            format!(
                "padded size {}x{} smaller than window {kh}x{kw}",
                xs.h + 2 * ph,
                xs.w + 2 * pw
            ),
        ));
    }
    if ph >= kh || pw >= kw {
        return Err(Error::shape(
            "maxpool2d",
            format!("padding ({ph},{pw}) must be smaller than window ({kh},{kw})"),
        ));
    }
    let oh = (xs.h + 2 * ph - kh) / sh + 1;
    let ow = (xs.w + 2 * pw - kw) / sw + 1;
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, oh, ow));
    let mut argmax = vec![usize::MAX; out.numel()];
    let xd = x.data();
    let od = out.data_mut();
    let mut oi = 0;
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = (n * xs.c + c) * xs.h * xs.w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..kh {
                        let iy = oy * sh + ky;
                        if iy < ph || iy >= xs.h + ph {
                            continue;
                        }
                        let iy = iy - ph;
                        for kx in 0..kw {
                            let ix = ox * sw + kx;
                            if ix < pw || ix >= xs.w + pw {
                                continue;
                            }
                            let ix = ix - pw;
                            let v = xd[base + iy * xs.w + ix];
                            if v > best {
                                best = v;
                                best_idx = base + iy * xs.w + ix;
                            }
                        }
                    }
                    od[oi] = best;
                    argmax[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub(crate) fn maxpool2d_backward(argmax: &[usize], gout: &[f64], gx: &mut [f64]) {
    for (&idx, &g) in argmax.iter().zip(gout) {
        if idx != usize::MAX {
            gx[idx] += g;
        }
    }
}

pub(crate) fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
    out
}

pub(crate) fn relu_backward(x: &Tensor, gout: &[f64], gx: &mut [f64]) {
    for ((g, &v), &go) in gx.iter_mut().zip(x.data()).zip(gout) {
        if v > 0.0 {
            *g += go;
        }
    }
}

/// Per-axis interpolation table under the half-pixel-center convention.
fn bilinear_axis(in_size: usize, out_size: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_size - 1) as f64);
            let i0 = s.floor() as usize;
            if i0 + 1 >= in_size {
                (in_size - 1, in_size - 1, 0.0)
            } else {
                (i0, i0 + 1, s - i0 as f64)
            }
        })
        .collect()
}

/// Bilinear resize of a plain tensor (also used outside the tape, e.g. for
/// input scaling and probability-map resampling).
pub fn bilinear_resize_data(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let xs = x.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize", "output size must be >= 1".into()));
    }
    if xs.h == out_h && xs.w == out_w {
        return Ok(x.clone());
    }
    let ys = bilinear_axis(xs.h, out_h);
    let xsax = bilinear_axis(xs.w, out_w);
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, out_h, out_w));
    let xd = x.data();
    let od = out.data_mut();
    let mut oi = 0;
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = (n * xs.c + c) * xs.h * xs.w;
            for &(y0, y1, fy) in &ys {
                let row0 = base + y0 * xs.w;
                let row1 = base + y1 * xs.w;
                for &(x0, x1, fx) in &xsax {
                    let top = xd[row0 + x0] * (1.0 - fx) + xd[row0 + x1] * fx;
                    let bot = xd[row1 + x0] * (1.0 - fx) + xd[row1 + x1] * fx;
                    od[oi] = top * (1.0 - fy) + bot * fy;
                    oi += 1;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn bilinear_backward(xs: Shape, out_h: usize, out_w: usize, gout: &[f64], gx: &mut [f64]) {
    if xs.h == out_h && xs.w == out_w {
        for (g, go) in gx.iter_mut().zip(gout) {
            *g += go;
        }
        return;
    }
    let ys = bilinear_axis(xs.h, out_h);
    let xsax = bilinear_axis(xs.w, out_w);
    let mut oi = 0;
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = (n * xs.c + c) * xs.h * xs.w;
            for &(y0, y1, fy) in &ys {
                let row0 = base + y0 * xs.w;
                let row1 = base + y1 * xs.w;
                for &(x0, x1, fx) in &xsax {
                    let g = gout[oi];
                    oi += 1;
                    gx[row0 + x0] += g * (1.0 - fy) * (1.0 - fx);
                    gx[row0 + x1] += g * (1.0 - fy) * fx;
                    gx[row1 + x0] += g * fy * (1.0 - fx);
                    gx[row1 + x1] += g * fy * fx;
                }
            }
        }
    }
}

/// Top-left crop to (out_h, out_w), used to drop padding after upsampling.
pub(crate) fn crop_forward(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let xs = x.shape();
    if out_h == 0 || out_w == 0 || out_h > xs.h || out_w > xs.w {
        return Err(Error::shape(
            "crop",
            format!("cannot crop {}x{} to {out_h}x{out_w}", xs.h, xs.w),
        ));
    }
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, out_h, out_w));
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..xs.n * xs.c {
        let src = nc * xs.h * xs.w;
        let dst = nc * out_h * out_w;
        for y in 0..out_h {
            od[dst + y * out_w..dst + (y + 1) * out_w]
                .copy_from_slice(&xd[src + y * xs.w..src + y * xs.w + out_w]);
        }
    }
    Ok(out)
}

pub(crate) fn crop_backward(xs: Shape, out_h: usize, out_w: usize, gout: &[f64], gx: &mut [f64]) {
    for nc in 0..xs.n * xs.c {
        let src = nc * xs.h * xs.w;
        let dst = nc * out_h * out_w;
        for y in 0..out_h {
            let grow = &gout[dst + y * out_w..dst + (y + 1) * out_w];
            let xrow = &mut gx[src + y * xs.w..src + y * xs.w + out_w];
            for (g, go) in xrow.iter_mut().zip(grow) {
                *g += go;
            }
        }
    }
}

/// Mean per-pixel softmax cross-entropy over non-ignored pixels. Returns the
/// loss and the number of scored pixels.
pub(crate) fn softmax_xent_forward(
    scores: &Tensor,
    target: &MaskTensor,
    ignore: u8,
) -> Result<(f64, usize)> {
    let ss = scores.shape();
    if ss.n != target.n || ss.h != target.h || ss.w != target.w {
        return Err(Error::shape(
            "softmax_xent",
            format!(
                "scores {} incompatible with target {}x{}x{}",
                ss, target.n, target.h, target.w
            ),
        ));
    }
    let k = ss.c;
    if k == 0 || k > 255 {
        return Err(Error::shape("softmax_xent", format!("class count {k} out of range")));
    }
    let sd = scores.data();
    let hw = ss.h * ss.w;
    let mut loss = 0.0;
    let mut scored = 0usize;
    for n in 0..ss.n {
        for y in 0..ss.h {
            for x in 0..ss.w {
                let t = target.at(n, y, x);
                if t == ignore {
                    continue;
                }
                if (t as usize) >= k {
                    return Err(Error::Label {
                        label: t,
                        num_classes: k,
                        n,
                        y,
                        x,
                    });
                }
                let base = n * k * hw + y * ss.w + x;
                let mut m = f64::NEG_INFINITY;
                for c in 0..k {
                    m = m.max(sd[base + c * hw]);
                }
                let mut denom = 0.0;
                for c in 0..k {
                    denom += (sd[base + c * hw] - m).exp();
                }
                let st = sd[base + (t as usize) * hw];
                loss += m + denom.ln() - st;
                scored += 1;
            }
        }
    }
    if scored > 0 {
        loss /= scored as f64;
    }
    Ok((loss, scored))
}

pub(crate) fn softmax_xent_backward(
    scores: &Tensor,
    target: &MaskTensor,
    ignore: u8,
    scored: usize,
    gloss: f64,
    gx: &mut [f64],
) {
    if scored == 0 {
        return;
    }
    let ss = scores.shape();
    let k = ss.c;
    let hw = ss.h * ss.w;
    let sd = scores.data();
    let scale = gloss / scored as f64;
    for n in 0..ss.n {
        for y in 0..ss.h {
            for x in 0..ss.w {
                let t = target.at(n, y, x);
                if t == ignore {
                    continue;
                }
                let base = n * k * hw + y * ss.w + x;
                let mut m = f64::NEG_INFINITY;
                for c in 0..k {
                    m = m.max(sd[base + c * hw]);
                }
                let mut denom = 0.0;
                for c in 0..k {
                    denom += (sd[base + c * hw] - m).exp();
                }
                for c in 0..k {
                    let p = (sd[base + c * hw] - m).exp() / denom;
                    let delta = if c == t as usize { 1.0 } else { 0.0 };
                    gx[base + c * hw] += (p - delta) * scale;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tape recording methods.
// ---------------------------------------------------------------------------

impl Tape {
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        spec: &ConvSpec,
    ) -> Result<ValueId> {
        if spec.has_bias != b.is_some() {
            return Err(Error::shape(
                "conv2d",
                if spec.has_bias {
                    "spec.has_bias is set but no bias tensor provided".to_string()
                } else {
                    "bias tensor provided but spec.has_bias is false".to_string()
                },
            ));
        }
        let out = {
            let xv = self.value(x);
            let wv = self.value(w);
            if xv.shape().c != spec.in_channels {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "input channels {} != spec.in_channels {}",
                        xv.shape().c,
                        spec.in_channels
                    ),
                ));
            }
            if wv.shape() != spec.weight_shape() {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "weight shape {} != expected {} for spec",
                        wv.shape(),
                        spec.weight_shape()
                    ),
                ));
            }
            let bv = b.map(|i| self.value(i));
            if let Some(bt) = bv {
                if bt.shape() != spec.bias_shape() {
                    return Err(Error::shape(
                        "conv2d",
                        format!(
                            "bias shape {} != expected {}",
                            bt.shape(),
                            spec.bias_shape()
                        ),
                    ));
                }
            }
            conv2d_forward(xv, wv, bv, spec)?
        };
        let needs =
            self.needs_grad(x) || self.needs_grad(w) || b.is_some_and(|i| self.needs_grad(i));
        let out_id = self.push_value(out, needs);
        self.push_op(OpRecord::Conv2d {
            x,
            w,
            b,
            spec: *spec,
            out: out_id,
        });
        Ok(out_id)
    }

    pub fn maxpool2d(
        &mut self,
        x: ValueId,
        window: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<ValueId> {
        let (out, argmax) = maxpool2d_forward(self.value(x), window, stride, padding)?;
        let needs = self.needs_grad(x);
        let out_id = self.push_value(out, needs);
        self.push_op(OpRecord::MaxPool2d {
            x,
            out: out_id,
            argmax,
        });
        Ok(out_id)
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out = relu_forward(self.value(x));
        let needs = self.needs_grad(x);
        let out_id = self.push_value(out, needs);
        self.push_op(OpRecord::Relu { x, out: out_id });
        out_id
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = {
            let av = self.value(a);
            let bv = self.value(b);
            if av.shape() != bv.shape() {
                return Err(Error::shape(
                    "add",
                    format!("operand shapes {} and {} differ", av.shape(), bv.shape()),
                ));
            }
            let mut out = av.clone();
            out.zero_grad();
            for (o, &v) in out.data_mut().iter_mut().zip(bv.data()) {
                *o += v;
            }
            out
        };
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let out_id = self.push_value(out, needs);
        self.push_op(OpRecord::Add { a, b, out: out_id });
        Ok(out_id)
    }

    pub fn bilinear_resize(&mut self, x: ValueId, out_h: usize, out_w: usize) -> Result<ValueId> {
        let out = bilinear_resize_data(self.value(x), out_h, out_w)?;
        let needs = self.needs_grad(x);
        let out_id = self.push_value(out, needs);
        self.push_op(OpRecord::BilinearResize { x, out: out_id });
        Ok(out_id)
    }

    pub fn crop(&mut self, x: ValueId, out_h: usize, out_w: usize) -> Result<ValueId> {
        let out = crop_forward(self.value(x), out_h, out_w)?;
        let needs = self.needs_grad(x);
        let out_id = self.push_value(out, needs);
        self.push_op(OpRecord::Crop { x, out: out_id });
        Ok(out_id)
    }

    /// Scalar mean softmax cross-entropy with an ignore label. The output is
    /// a 1x1x1x1 tensor; if every pixel is ignored the loss is 0 with zero
    /// gradients.
    pub fn softmax_xent(
        &mut self,
        scores: ValueId,
        target: &MaskTensor,
        ignore: u8,
    ) -> Result<ValueId> {
        let (loss, scored) = softmax_xent_forward(self.value(scores), target, ignore)?;
        let out = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![loss]).unwrap();
        let needs = self.needs_grad(scores);
        let out_id = self.push_value(out, needs);
        self.push_op(OpRecord::SoftmaxXent {
            scores,
            out: out_id,
            target: target.clone(),
            ignore,
            scored,
        });
        Ok(out_id)
    }
}

// ---------------------------------------------------------------------------
// Plain-tensor helpers shared by evaluation and data preparation.
// ---------------------------------------------------------------------------

/// Channel-wise softmax of a score tensor (inference-side, not recorded).
pub fn softmax_channels(scores: &Tensor) -> Tensor {
    let ss = scores.shape();
    let hw = ss.h * ss.w;
    let mut out = Tensor::zeros(ss);
    let sd = scores.data();
    let od = out.data_mut();
    for n in 0..ss.n {
        for i in 0..hw {
            let base = n * ss.c * hw + i;
            let mut m = f64::NEG_INFINITY;
            for c in 0..ss.c {
                m = m.max(sd[base + c * hw]);
            }
            let mut denom = 0.0;
            for c in 0..ss.c {
                denom += (sd[base + c * hw] - m).exp();
            }
            for c in 0..ss.c {
                od[base + c * hw] = (sd[base + c * hw] - m).exp() / denom;
            }
        }
    }
    out
}

/// Per-pixel argmax over channels; ties resolve to the lowest class index.
pub fn argmax_channels(scores: &Tensor) -> MaskTensor {
    let ss = scores.shape();
    let hw = ss.h * ss.w;
    let sd = scores.data();
    let mut mask = MaskTensor::filled(ss.n, ss.h, ss.w, 0);
    let md = mask.data_mut();
    for n in 0..ss.n {
        for i in 0..hw {
            let base = n * ss.c * hw + i;
            let mut best_c = 0usize;
            let mut best = sd[base];
            for c in 1..ss.c {
                let v = sd[base + c * hw];
                if v > best {
                    best = v;
                    best_c = c;
                }
            }
            md[n * hw + i] = best_c as u8;
        }
    }
    mask
}

/// Mirror index into [0, n) without repeating the edge sample (reflect-101),
/// folding as often as needed so arbitrary padding widths stay valid.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Reflect-pad a tensor on the bottom/right to the requested size.
pub fn reflect_pad_br(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let xs = x.shape();
    if out_h < xs.h || out_w < xs.w {
        return Err(Error::shape(
            "reflect_pad",
            format!("target {out_h}x{out_w} smaller than input {}x{}", xs.h, xs.w),
        ));
    }
    if out_h == xs.h && out_w == xs.w {
        return Ok(x.clone());
    }
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, out_h, out_w));
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..xs.n * xs.c {
        let src = nc * xs.h * xs.w;
        let dst = nc * out_h * out_w;
        for y in 0..out_h {
            let iy = reflect_index(y as isize, xs.h);
            for xx in 0..out_w {
                let ix = reflect_index(xx as isize, xs.w);
                od[dst + y * out_w + xx] = xd[src + iy * xs.w + ix];
            }
        }
    }
    Ok(out)
}

/// Round a scaled dimension, never below 1.
pub fn scaled_dim(size: usize, factor: f64) -> usize {
    ((size as f64 * factor).round() as usize).max(1)
}

/// Next multiple of `unit` at or above `size`.
pub fn pad_to_multiple(size: usize, unit: usize) -> usize {
    size.div_ceil(unit) * unit
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn tensor(shape: Shape, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(
            Shape::new(1, 1, 3, 3),
            vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.5, 4.0, 2.0, -3.0],
        ));
        let w = tape.leaf(tensor(Shape::new(1, 1, 1, 1), vec![1.0]));
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            has_bias: false,
        };
        let y = tape.conv2d(x, w, None, &spec).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 3, 4, 4)));
        let w = tape.leaf(Tensor::zeros(Shape::new(2, 2, 3, 3)));
        let spec = ConvSpec::k3(2, 2, false);
        let err = tape.conv2d(x, w, None, &spec).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }

    #[test]
    fn conv_rejects_nonpositive_output() {
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel: (5, 5),
            stride: (1, 1),
            padding: (0, 0),
            has_bias: false,
        };
        assert!(spec.output_hw(3, 8).is_err());
    }

    #[test]
    fn maxpool_constant_field() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(Shape::new(1, 2, 5, 5), 3.25));
        let y = tape.maxpool2d(x, (3, 3), (1, 1), (1, 1)).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn maxpool_rejects_padding_not_smaller_than_window() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 4, 4)));
        assert!(tape.maxpool2d(x, (2, 2), (1, 1), (2, 2)).is_err());
    }

    #[test]
    fn relu_trivial_cases() {
        let mut tape = Tape::new();
        let neg = tape.leaf(Tensor::filled(Shape::new(1, 1, 2, 2), -4.0));
        let y = tape.relu(neg);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let pos = tape.leaf(tensor(Shape::new(1, 1, 1, 3), vec![0.5, 2.0, 7.0]));
        let y = tape.relu(pos);
        assert_eq!(tape.value(y).data(), &[0.5, 2.0, 7.0]);
    }

    #[test]
    fn add_identity_and_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor(Shape::new(1, 1, 1, 3), vec![1.0, -2.0, 3.5]));
        let z = tape.leaf(Tensor::zeros(Shape::new(1, 1, 1, 3)));
        let y = tape.add(a, z).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(a).data());
        let bad = tape.leaf(Tensor::zeros(Shape::new(1, 1, 3, 1)));
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn bilinear_constant_and_identity() {
        let c = Tensor::filled(Shape::new(1, 2, 3, 4), 1.75);
        let up = bilinear_resize_data(&c, 9, 13).unwrap();
        assert!(up.data().iter().all(|&v| v == 1.75));
        let x = tensor(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let same = bilinear_resize_data(&x, 2, 2).unwrap();
        assert_eq!(same.data(), x.data());
    }

    // Hand evaluation of the half-pixel formula for a 2x2 -> 4x4 resize.
    // Source coords per output index d: s = (d + 0.5)/2 - 0.5, clamped,
    // giving {0, 0.25, 0.75, 1.0} along each axis.
    #[test]
    fn bilinear_2x2_to_4x4_hand_values() {
        let x = tensor(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let up = bilinear_resize_data(&x, 4, 4).unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0, 1.25, 1.75, 2.0,
            1.5, 1.75, 2.25, 2.5,
            2.5, 2.75, 3.25, 3.5,
            3.0, 3.25, 3.75, 4.0,
        ];
        for (i, (&got, &want)) in up.data().iter().zip(&expected).enumerate() {
            assert!((got - want).abs() < 1e-12, "index {i}: {got} vs {want}");
        }
    }

    #[test]
    fn xent_uniform_scores_give_ln_k() {
        let mut tape = Tape::new();
        let scores = tape.leaf(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        let target = MaskTensor::from_vec(1, 2, 2, vec![0, 1, 1, 0]).unwrap();
        let loss = tape.softmax_xent(scores, &target, 255).unwrap();
        let got = tape.value(loss).data()[0];
        assert!((got - 2.0f64.ln()).abs() < 1e-12, "{got}");
    }

    #[test]
    fn xent_margin_drives_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 4.0, 16.0, 64.0] {
            let mut tape = Tape::new();
            let mut s = Tensor::zeros(Shape::new(1, 2, 1, 1));
            s.data_mut()[0] = margin; // class 0 correct
            let scores = tape.leaf(s);
            let target = MaskTensor::from_vec(1, 1, 1, vec![0]).unwrap();
            let loss = tape.softmax_xent(scores, &target, 255).unwrap();
            let v = tape.value(loss).data()[0];
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn xent_all_ignored_is_zero_with_zero_grads() {
        let mut tape = Tape::new();
        let scores = tape.leaf(Tensor::filled(Shape::new(1, 3, 2, 2), 0.7).with_grad());
        let target = MaskTensor::filled(1, 2, 2, 255);
        let loss = tape.softmax_xent(scores, &target, 255).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
        tape.backward(loss).unwrap();
        assert!(tape.grad(scores).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn xent_out_of_range_label_names_pixel() {
        let mut tape = Tape::new();
        let scores = tape.leaf(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        let target = MaskTensor::from_vec(1, 2, 2, vec![0, 1, 5, 0]).unwrap();
        let err = tape.softmax_xent(scores, &target, 255).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("y=1") && msg.contains("x=0"), "{msg}");
    }

    #[test]
    fn reflect_index_folds() {
        assert_eq!(reflect_index(0, 4), 0);
        assert_eq!(reflect_index(3, 4), 3);
        assert_eq!(reflect_index(4, 4), 2);
        assert_eq!(reflect_index(5, 4), 1);
        assert_eq!(reflect_index(6, 4), 0);
        assert_eq!(reflect_index(7, 4), 1);
        assert_eq!(reflect_index(2, 1), 0);
    }

    #[test]
    fn pad_helpers() {
        assert_eq!(pad_to_multiple(64, 32), 64);
        assert_eq!(pad_to_multiple(65, 32), 96);
        assert_eq!(scaled_dim(64, 1.2), 77);
        assert_eq!(scaled_dim(64, 0.6), 38);
        assert_eq!(scaled_dim(1, 0.1), 1);
    }
}
