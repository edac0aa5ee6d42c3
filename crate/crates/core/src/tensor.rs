//! Dense `f64` tensors in NCHW layout.
//!
//! Every image and feature map in the crate is a [`Tensor`] with an explicit
//! batch dimension. A single image is a tensor with `n == 1`.

use rand::Rng;

use crate::error::{Error, Result};

/// Shape of an NCHW tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one `(h, w)` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one batch item.
    pub const fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// A dense real-valued array with `(batch, channels, height, width)` semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

/// Images are tensors whose batch dimension is one.
pub type ImageTensor = Tensor;

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// A single `(c, h, w)` image.
    pub fn image(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(Shape::new(1, c, h, w), data)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.len()).map(|_| rng.random_range(lo..hi)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Borrow batch item `n` as a flat `(c, h, w)` slice.
    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.shape.item();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.shape.item();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Borrow one `(h, w)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let len = self.shape.plane();
        let start = (n * self.shape.c + c) * len;
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let len = self.shape.plane();
        let start = (n * self.shape.c + c) * len;
        &mut self.data[start..start + len]
    }

    /// Extract batch item `n` as its own single-item tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.item(n).to_vec(),
        }
    }

    /// Stack equally shaped tensors along the batch dimension.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty list of tensors"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.len() * items.len());
        let mut n = 0;
        for t in items {
            let ts = t.shape;
            if (ts.c, ts.h, ts.w) != (s.c, s.h, s.w) {
                return Err(Error::shape("stack", s, ts));
            }
            data.extend_from_slice(&t.data);
            n += ts.n;
        }
        Ok(Tensor {
            shape: Shape::new(n, s.c, s.h, s.w),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape("zip_map", other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Same data viewed with a different shape of equal length.
    pub fn reshape(mut self, shape: Shape) -> Result<Tensor> {
        if shape.len() != self.data.len() {
            return Err(Error::shape("reshape", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn expect_same_shape(&self, what: &str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(what, self.shape, other.shape));
        }
        Ok(())
    }

    /// Replicate a single channel tensor to `c` channels.
    pub fn repeat_channels(&self, c: usize) -> Result<Tensor> {
        let s = self.shape;
        if s.c != 1 {
            return Err(Error::invalid(format!(
                "repeat_channels expects one channel, got {}",
                s.c
            )));
        }
        let mut out = Tensor::zeros(Shape::new(s.n, c, s.h, s.w));
        for n in 0..s.n {
            for ch in 0..c {
                out.plane_mut(n, ch).copy_from_slice(self.plane(n, 0));
            }
        }
        Ok(out)
    }

    /// Copy of the `(h, w)` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape;
        if y0 + h > s.h || x0 + w > s.w || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "crop window {h}x{w} at ({y0}, {x0}) does not fit {}x{}",
                s.h, s.w
            )));
        }
        Ok(Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| {
            self.at(n, c, y + y0, x + x0)
        }))
    }

    /// Reflect-pad bottom and right edges up to `(h, w)`.
    ///
    /// Uses mirror reflection without repeating the edge sample, folding
    /// repeatedly when the pad exceeds the source size.
    pub fn pad_reflect_to(&self, h: usize, w: usize) -> Tensor {
        let s = self.shape;
        Tensor::from_fn(Shape::new(s.n, s.c, h.max(s.h), w.max(s.w)), |n, c, y, x| {
            self.at(n, c, reflect_index(y as isize, s.h), reflect_index(x as isize, s.w))
        })
    }

    /// Rotate every plane by `quarter_turns * 90` degrees counter-clockwise.
    pub fn rot90(&self, quarter_turns: u8) -> Tensor {
        let s = self.shape;
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => Tensor::from_fn(Shape::new(s.n, s.c, s.w, s.h), |n, c, y, x| {
                self.at(n, c, x, s.w - 1 - y)
            }),
            2 => Tensor::from_fn(s, |n, c, y, x| self.at(n, c, s.h - 1 - y, s.w - 1 - x)),
            _ => Tensor::from_fn(Shape::new(s.n, s.c, s.w, s.h), |n, c, y, x| {
                self.at(n, c, s.h - 1 - x, y)
            }),
        }
    }
}

/// Mirror an index into `[0, len)` without repeating the border sample.
#[inline]
pub fn reflect_index(mut i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let len = len as isize;
    let period = 2 * (len - 1);
    i = i.rem_euclid(period);
    if i >= len {
        i = period - i;
    }
    i as usize
}
