//! Forward and backward kernels for the layers used by the network and the
//! perceptual encoders.
//!
//! All kernels operate on NCHW [`Tensor`]s and loop over the batch in order,
//! so results are bitwise reproducible for a fixed input. Convolutions are
//! lowered to GEMM through `im2col` / `col2im`.

use crate::tensor::{reflect_index, Shape, Tensor};

/// Border handling for convolution windows that leave the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize, padding: Padding) -> Self {
        Self {
            kernel,
            stride,
            pad,
            padding,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    #[inline]
    fn source(&self, out: usize, k: usize, len: usize) -> Option<usize> {
        let i = (out * self.stride + k) as isize - self.pad as isize;
        if i >= 0 && (i as usize) < len {
            Some(i as usize)
        } else {
            match self.padding {
                Padding::Zero => None,
                Padding::Reflect => Some(reflect_index(i, len)),
            }
        }
    }
}

/// `c = op(a) * op(b) + beta * c` for row-major matrices, `op(a)` is `m x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices are sized for the given dimensions and strides (checked above).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold one `(c, h, w)` item into a `(c * k * k, oh * ow)` column matrix.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, oh: usize, ow: usize, col: &mut [f64]) {
    let k = g.kernel;
    let cols = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * cols;
                for oy in 0..oh {
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    match g.source(oy, ki, h) {
                        None => dst.fill(0.0),
                        Some(iy) => {
                            let src = &plane[iy * w..(iy + 1) * w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match g.source(ox, kj, w) {
                                    Some(ix) => src[ix],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate a column matrix back onto an item.
fn col2im_add(col: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, oh: usize, ow: usize, x: &mut [f64]) {
    let k = g.kernel;
    let cols = oh * ow;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * cols;
                for oy in 0..oh {
                    let Some(iy) = g.source(oy, ki, h) else { continue };
                    let src = &col[row + oy * ow..row + (oy + 1) * ow];
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    for (ox, &v) in src.iter().enumerate() {
                        if let Some(ix) = g.source(ox, kj, w) {
                            dst[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(y: &mut Tensor, bias: &Tensor) {
    let s = y.shape();
    for n in 0..s.n {
        for c in 0..s.c {
            let b = bias.data()[c];
            y.plane_mut(n, c).iter_mut().for_each(|v| *v += b);
        }
    }
}

fn bias_grad(dy: &Tensor) -> Tensor {
    let s = dy.shape();
    let mut db = Tensor::zeros(Shape::new(s.c, 1, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            db.data_mut()[c] += dy.plane(n, c).iter().sum::<f64>();
        }
    }
    db
}

/// Standard convolution. `weight` has shape `(cout, cin, k, k)` and `bias`
/// shape `(cout, 1, 1, 1)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Tensor {
    let xs = x.shape();
    let ws = weight.shape();
    assert_eq!(xs.c, ws.c, "conv2d input channels");
    assert_eq!((ws.h, ws.w), (g.kernel, g.kernel), "conv2d kernel size");
    let (oh, ow) = (g.out_len(xs.h), g.out_len(xs.w));
    let kk = xs.c * g.kernel * g.kernel;
    let mut y = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * oh * ow] };
    for n in 0..xs.n {
        let colm: &[f64] = if g.is_pointwise() {
            x.item(n)
        } else {
            im2col(x.item(n), xs.c, xs.h, xs.w, g, oh, ow, &mut col);
            &col
        };
        gemm(ws.n, kk, oh * ow, weight.data(), false, colm, false, y.item_mut(n), 0.0);
    }
    if let Some(b) = bias {
        add_bias(&mut y, b);
    }
    y
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn conv2d_backward(x: &Tensor, weight: &Tensor, g: ConvGeom, dy: &Tensor, need_dx: bool) -> ConvGrads {
    let xs = x.shape();
    let ws = weight.shape();
    let (oh, ow) = (dy.shape().h, dy.shape().w);
    let kk = xs.c * g.kernel * g.kernel;
    let mut dw = Tensor::zeros(ws);
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * oh * ow] };
    let mut dcol = vec![0.0; kk * oh * ow];
    for n in 0..xs.n {
        let colm: &[f64] = if g.is_pointwise() {
            x.item(n)
        } else {
            im2col(x.item(n), xs.c, xs.h, xs.w, g, oh, ow, &mut col);
            &col
        };
        gemm(ws.n, oh * ow, kk, dy.item(n), false, colm, true, dw.data_mut(), 1.0);
        if let Some(dx) = dx.as_mut() {
            if g.is_pointwise() {
                gemm(kk, ws.n, oh * ow, weight.data(), true, dy.item(n), false, dx.item_mut(n), 0.0);
            } else {
                gemm(kk, ws.n, oh * ow, weight.data(), true, dy.item(n), false, &mut dcol, 0.0);
                col2im_add(&dcol, xs.c, xs.h, xs.w, g, oh, ow, dx.item_mut(n));
            }
        }
    }
    ConvGrads {
        dx,
        dw,
        db: bias_grad(dy),
    }
}

/// Transposed convolution. `weight` has shape `(cin, cout, k, k)`; the output
/// spatial size is `(len - 1) * stride - 2 * pad + k`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Tensor {
    let xs = x.shape();
    let ws = weight.shape();
    assert_eq!(xs.c, ws.n, "conv_transpose2d input channels");
    assert_eq!(g.padding, Padding::Zero, "transposed convolution pads with zeros");
    let cout = ws.c;
    let oh = (xs.h - 1) * g.stride + g.kernel - 2 * g.pad;
    let ow = (xs.w - 1) * g.stride + g.kernel - 2 * g.pad;
    let kk = cout * g.kernel * g.kernel;
    let mut y = Tensor::zeros(Shape::new(xs.n, cout, oh, ow));
    let mut cols = vec![0.0; kk * xs.h * xs.w];
    for n in 0..xs.n {
        gemm(kk, xs.c, xs.h * xs.w, weight.data(), true, x.item(n), false, &mut cols, 0.0);
        col2im_add(&cols, cout, oh, ow, g, xs.h, xs.w, y.item_mut(n));
    }
    if let Some(b) = bias {
        add_bias(&mut y, b);
    }
    y
}

pub fn conv_transpose2d_backward(x: &Tensor, weight: &Tensor, g: ConvGeom, dy: &Tensor, need_dx: bool) -> ConvGrads {
    let xs = x.shape();
    let ws = weight.shape();
    let ds = dy.shape();
    let kk = ws.c * g.kernel * g.kernel;
    let mut dw = Tensor::zeros(ws);
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    let mut dcols = vec![0.0; kk * xs.h * xs.w];
    for n in 0..xs.n {
        im2col(dy.item(n), ds.c, ds.h, ds.w, g, xs.h, xs.w, &mut dcols);
        gemm(xs.c, xs.h * xs.w, kk, x.item(n), false, &dcols, true, dw.data_mut(), 1.0);
        if let Some(dx) = dx.as_mut() {
            gemm(xs.c, kk, xs.h * xs.w, weight.data(), false, &dcols, false, dx.item_mut(n), 0.0);
        }
    }
    ConvGrads {
        dx,
        dw,
        db: bias_grad(dy),
    }
}

/// Bilinear sample of one plane with zero outside `(-1, len)`, matching the
/// usual deformable-convolution sampling rule. Returns the value and its
/// partial derivatives with respect to `y` and `x`.
#[inline]
fn bilinear_sample(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> (f64, f64, f64) {
    if y <= -1.0 || y >= h as f64 || x <= -1.0 || x >= w as f64 {
        return (0.0, 0.0, 0.0);
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let get = |yy: isize, xx: isize| -> f64 {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            plane[yy as usize * w + xx as usize]
        } else {
            0.0
        }
    };
    let v00 = get(y0, x0);
    let v01 = get(y0, x0 + 1);
    let v10 = get(y0 + 1, x0);
    let v11 = get(y0 + 1, x0 + 1);
    let val = (1.0 - ly) * (1.0 - lx) * v00 + (1.0 - ly) * lx * v01 + ly * (1.0 - lx) * v10 + ly * lx * v11;
    let dy = (1.0 - lx) * (v10 - v00) + lx * (v11 - v01);
    let dx = (1.0 - ly) * (v01 - v00) + ly * (v11 - v10);
    (val, dy, dx)
}

/// Scatter `g` into the four bilinear neighbours of `(y, x)`.
#[inline]
fn bilinear_scatter(plane: &mut [f64], h: usize, w: usize, y: f64, x: f64, g: f64) {
    if y <= -1.0 || y >= h as f64 || x <= -1.0 || x >= w as f64 {
        return;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let mut put = |yy: isize, xx: isize, v: f64| {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            plane[yy as usize * w + xx as usize] += v;
        }
    };
    put(y0, x0, (1.0 - ly) * (1.0 - lx) * g);
    put(y0, x0 + 1, (1.0 - ly) * lx * g);
    put(y0 + 1, x0, ly * (1.0 - lx) * g);
    put(y0 + 1, x0 + 1, ly * lx * g);
}

/// Sampling position of kernel tap `j` for output pixel `p` of a deformable
/// convolution (stride 1, dilation 1, "same" zero padding).
#[inline]
fn deform_pos(off: &[f64], plane: usize, k: usize, j: usize, p: usize, w: usize) -> (f64, f64) {
    let pad = (k / 2) as f64;
    let (oy, ox) = (p / w, p % w);
    let (ki, kj) = (j / k, j % k);
    let dy = off[2 * j * plane + p];
    let dx = off[(2 * j + 1) * plane + p];
    (oy as f64 - pad + ki as f64 + dy, ox as f64 - pad + kj as f64 + dx)
}

fn deform_im2col(x: &[f64], off: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let plane = h * w;
    let taps = k * k;
    for ci in 0..c {
        let xp = &x[ci * plane..(ci + 1) * plane];
        for j in 0..taps {
            let row = &mut col[(ci * taps + j) * plane..(ci * taps + j + 1) * plane];
            for (p, r) in row.iter_mut().enumerate() {
                let (sy, sx) = deform_pos(off, plane, k, j, p, w);
                *r = bilinear_sample(xp, h, w, sy, sx).0;
            }
        }
    }
}

/// Deformable convolution (v1: offsets only, one offset group), stride 1,
/// odd square kernel with "same" zero padding. `offset` has shape
/// `(n, 2 * k * k, h, w)` holding `(dy, dx)` pairs per kernel tap.
pub fn deform_conv2d(x: &Tensor, offset: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let xs = x.shape();
    let ws = weight.shape();
    let k = ws.h;
    assert_eq!(xs.c, ws.c, "deform_conv2d input channels");
    assert_eq!(offset.shape(), Shape::new(xs.n, 2 * k * k, xs.h, xs.w), "deform_conv2d offsets");
    let kk = xs.c * k * k;
    let mut y = Tensor::zeros(Shape::new(xs.n, ws.n, xs.h, xs.w));
    let mut col = vec![0.0; kk * xs.h * xs.w];
    for n in 0..xs.n {
        deform_im2col(x.item(n), offset.item(n), xs.c, xs.h, xs.w, k, &mut col);
        gemm(ws.n, kk, xs.plane(), weight.data(), false, &col, false, y.item_mut(n), 0.0);
    }
    if let Some(b) = bias {
        add_bias(&mut y, b);
    }
    y
}

pub struct DeformGrads {
    pub dx: Option<Tensor>,
    pub doffset: Option<Tensor>,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn deform_conv2d_backward(
    x: &Tensor,
    offset: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    need_dx: bool,
    need_doffset: bool,
) -> DeformGrads {
    let xs = x.shape();
    let ws = weight.shape();
    let k = ws.h;
    let taps = k * k;
    let plane = xs.plane();
    let kk = xs.c * taps;
    let mut dw = Tensor::zeros(ws);
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    let mut doff = need_doffset.then(|| Tensor::zeros(offset.shape()));
    let mut col = vec![0.0; kk * plane];
    let mut dcol = vec![0.0; kk * plane];
    for n in 0..xs.n {
        let xi = x.item(n);
        let oi = offset.item(n);
        deform_im2col(xi, oi, xs.c, xs.h, xs.w, k, &mut col);
        gemm(ws.n, plane, kk, dy.item(n), false, &col, true, dw.data_mut(), 1.0);
        if dx.is_none() && doff.is_none() {
            continue;
        }
        gemm(kk, ws.n, plane, weight.data(), true, dy.item(n), false, &mut dcol, 0.0);
        for ci in 0..xs.c {
            let xp = &xi[ci * plane..(ci + 1) * plane];
            for j in 0..taps {
                let row = &dcol[(ci * taps + j) * plane..(ci * taps + j + 1) * plane];
                for (p, &g) in row.iter().enumerate() {
                    let (sy, sx) = deform_pos(oi, plane, k, j, p, xs.w);
                    if let Some(d) = doff.as_mut() {
                        let (_, gy, gx) = bilinear_sample(xp, xs.h, xs.w, sy, sx);
                        let di = d.item_mut(n);
                        di[2 * j * plane + p] += g * gy;
                        di[(2 * j + 1) * plane + p] += g * gx;
                    }
                    if let Some(d) = dx.as_mut() {
                        let dp = &mut d.item_mut(n)[ci * plane..(ci + 1) * plane];
                        bilinear_scatter(dp, xs.h, xs.w, sy, sx, g);
                    }
                }
            }
        }
    }
    DeformGrads {
        dx,
        doffset: doff,
        dw,
        db: bias_grad(dy),
    }
}

/// Per-axis interpolation taps for half-pixel bilinear resizing.
fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with `align_corners = false` and edge replication.
/// Resizing to the same size returns an exact copy.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = x.shape();
    if (s.h, s.w) == (oh, ow) {
        return x.clone();
    }
    let ty = resize_taps(s.h, oh);
    let tx = resize_taps(s.w, ow);
    let mut y = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = y.plane_mut(n, c);
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let top = src[y0 * s.w + x0] * (1.0 - wx) + src[y0 * s.w + x1] * wx;
                    let bot = src[y1 * s.w + x0] * (1.0 - wx) + src[y1 * s.w + x1] * wx;
                    dst[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
    }
    y
}

pub fn resize_bilinear_backward(in_shape: Shape, dy: &Tensor) -> Tensor {
    let ds = dy.shape();
    if (in_shape.h, in_shape.w) == (ds.h, ds.w) {
        return dy.clone();
    }
    let ty = resize_taps(in_shape.h, ds.h);
    let tx = resize_taps(in_shape.w, ds.w);
    let mut dx = Tensor::zeros(in_shape);
    let w = in_shape.w;
    for n in 0..ds.n {
        for c in 0..ds.c {
            let g = dy.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let v = g[oy * ds.w + ox];
                    dst[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                    dst[y0 * w + x1] += v * (1.0 - wy) * wx;
                    dst[y1 * w + x0] += v * wy * (1.0 - wx);
                    dst[y1 * w + x1] += v * wy * wx;
                }
            }
        }
    }
    dx
}

/// Mean over non-overlapping `factor x factor` blocks. Dimensions must be
/// divisible by `factor`.
pub fn area_downsample(x: &Tensor, factor: usize) -> Tensor {
    let s = x.shape();
    assert!(factor >= 1 && s.h % factor == 0 && s.w % factor == 0, "area_downsample divisibility");
    if factor == 1 {
        return x.clone();
    }
    let (oh, ow) = (s.h / factor, s.w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut y = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = y.plane_mut(n, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        let row = &src[(oy * factor + dy) * s.w + ox * factor..][..factor];
                        acc += row.iter().sum::<f64>();
                    }
                    dst[oy * ow + ox] = acc * norm;
                }
            }
        }
    }
    y
}

/// Adjoint of [`area_downsample`]: spreads each output gradient evenly over its block.
pub fn area_downsample_backward(in_shape: Shape, factor: usize, dy: &Tensor) -> Tensor {
    if factor == 1 {
        return dy.clone();
    }
    let norm = 1.0 / (factor * factor) as f64;
    let ow = in_shape.w / factor;
    Tensor::from_fn(in_shape, |n, c, y, x| dy.plane(n, c)[(y / factor) * ow + x / factor] * norm)
}

/// 2x2 max pooling with stride 2 (floor mode). Returns the pooled tensor and
/// the flat input index of each selected element.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let s = x.shape();
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut y = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let mut arg = Vec::with_capacity(y.len());
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = x.index(n, c, 2 * oy, 2 * ox);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = x.index(n, c, 2 * oy + dy, 2 * ox + dx);
                        if x.data()[i] > x.data()[best] {
                            best = i;
                        }
                    }
                    y.set(n, c, oy, ox, x.data()[best]);
                    arg.push(best);
                }
            }
        }
    }
    (y, arg)
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let norm = 1.0 / s.plane() as f64;
    Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| x.plane(n, c).iter().sum::<f64>() * norm)
}

/// Concatenate along the channel dimension.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!((sa.n, sa.h, sa.w), (sb.n, sb.h, sb.w), "concat_channels shapes");
    let mut y = Tensor::zeros(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w));
    for n in 0..sa.n {
        let dst = y.item_mut(n);
        dst[..sa.item()].copy_from_slice(a.item(n));
        dst[sa.item()..].copy_from_slice(b.item(n));
    }
    y
}

pub fn split_channels(dy: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let s = dy.shape();
    let cb = s.c - ca;
    let mut a = Tensor::zeros(Shape::new(s.n, ca, s.h, s.w));
    let mut b = Tensor::zeros(Shape::new(s.n, cb, s.h, s.w));
    let split = ca * s.plane();
    for n in 0..s.n {
        let src = dy.item(n);
        a.item_mut(n).copy_from_slice(&src[..split]);
        b.item_mut(n).copy_from_slice(&src[split..]);
    }
    (a, b)
}
