//! Building blocks of the hierarchical dehazing network.

use crate::error::{Error, Result};
use crate::kernels::{ConvGeom, Padding};

use super::params::{Binder, Conv, ParamBuilder, ParamOps, TransConv};

/// 3x3 "same" convolution with reflect padding.
pub const SAME_REFLECT: ConvGeom = ConvGeom::new(3, 1, 1, Padding::Reflect);
/// 3x3 "same" convolution with zero padding.
pub const SAME_ZERO: ConvGeom = ConvGeom::new(3, 1, 1, Padding::Zero);
/// 3x3 stride-2 convolution halving the spatial size.
pub const DOWN2: ConvGeom = ConvGeom::new(3, 2, 1, Padding::Zero);
pub const POINTWISE: ConvGeom = ConvGeom::new(1, 1, 0, Padding::Zero);

/// Deformable 3x3 convolution (offsets only). The offsets come from a plain
/// 3x3 convolution that starts at zero, so an untrained layer samples the
/// regular grid and behaves like a zero-padded convolution.
#[derive(Clone, Debug)]
pub struct DeformConv {
    pub offset: Conv,
    pub conv: Conv,
}

impl DeformConv {
    pub fn new(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Self {
        let offset = b.offset_conv(&format!("{name}.offset"), cin, 18, SAME_ZERO);
        let conv = b.conv(name, cin, cout, SAME_ZERO);
        Self { offset, conv }
    }

    pub fn forward<O: ParamOps>(&self, o: &mut O, p: &mut Binder<'_, O::V>, x: &O::V) -> O::V {
        let off = self.offset.forward(o, p, x);
        let w = p.get(o, self.conv.weight);
        let b = p.get(o, self.conv.bias);
        o.deform_conv2d(x, &off, &w, Some(&b))
    }
}

/// Feature extractor after a branch stem.
#[derive(Clone, Debug)]
pub enum Extractor {
    Deformable(DeformConv),
    /// Same kernel shape and padding as the deformable layer, fixed grid.
    Plain(Conv),
}

/// One branch of the hierarchical feature extractor: a strided 3x3 stem from
/// the input image followed by a deformable (or plain) 3x3 convolution.
#[derive(Clone, Debug)]
pub struct HfeBranch {
    pub stem: Conv,
    pub body: Extractor,
}

impl HfeBranch {
    pub fn new(b: &mut ParamBuilder, name: &str, level: usize, width: usize, use_dcn: bool) -> Self {
        let stride = 1 << level;
        let stem = b.conv(&format!("{name}.stem"), 3, width, ConvGeom::new(3, stride, 1, Padding::Zero));
        let body = if use_dcn {
            Extractor::Deformable(DeformConv::new(b, &format!("{name}.dcn"), width, width))
        } else {
            Extractor::Plain(b.conv(&format!("{name}.conv"), width, width, SAME_ZERO))
        };
        Self { stem, body }
    }

    pub fn forward<O: ParamOps>(&self, o: &mut O, p: &mut Binder<'_, O::V>, x: &O::V) -> O::V {
        let s = self.stem.forward(o, p, x);
        match &self.body {
            Extractor::Deformable(d) => d.forward(o, p, &s),
            Extractor::Plain(c) => c.forward(o, p, &s),
        }
    }
}

/// Hierarchical fusion block: bottom-up then top-down residual-difference
/// fusion across the three pyramid levels. Shape preserving.
#[derive(Clone, Debug)]
pub struct Hfb {
    /// F2 -> level 3 in the first bottom-up stage.
    pub down_f2: Conv,
    /// F21 -> level 2.
    pub up_f21: TransConv,
    /// F1 -> level 2.
    pub down_f1: Conv,
    /// F11 -> level 1.
    pub up_f11: TransConv,
    /// F22 -> level 1 in the first top-down stage.
    pub up_f22: TransConv,
    /// F23 -> level 2.
    pub down_f23: Conv,
    /// F3 -> level 2.
    pub up_f3: TransConv,
    /// F31 -> level 3.
    pub down_f31: Conv,
}

impl Hfb {
    pub fn new(b: &mut ParamBuilder, name: &str, width: usize) -> Self {
        let (c1, c2, c3) = (width, 2 * width, 4 * width);
        Self {
            down_f2: b.conv(&format!("{name}.down_f2"), c2, c3, DOWN2),
            up_f21: b.trans_conv(&format!("{name}.up_f21"), c3, c2),
            down_f1: b.conv(&format!("{name}.down_f1"), c1, c2, DOWN2),
            up_f11: b.trans_conv(&format!("{name}.up_f11"), c2, c1),
            up_f22: b.trans_conv(&format!("{name}.up_f22"), c2, c1),
            down_f23: b.conv(&format!("{name}.down_f23"), c1, c2, DOWN2),
            up_f3: b.trans_conv(&format!("{name}.up_f3"), c3, c2),
            down_f31: b.conv(&format!("{name}.down_f31"), c2, c3, DOWN2),
        }
    }

    pub fn forward<O: ParamOps>(
        &self,
        o: &mut O,
        p: &mut Binder<'_, O::V>,
        f: &[O::V; 3],
    ) -> Result<[O::V; 3]> {
        check_pyramid(o, f)?;
        let [f1, f2, f3] = f;
        // bottom-up
        let r = o.relu(f2);
        let t = self.down_f2.forward(o, p, &r);
        let f21 = o.sub(f3, &t);
        let r = o.relu(&f21);
        let t = self.up_f21.forward(o, p, &r);
        let f22 = o.add(&t, f2);
        let r = o.relu(f1);
        let t = self.down_f1.forward(o, p, &r);
        let f11 = o.sub(&f22, &t);
        let r = o.relu(&f11);
        let t = self.up_f11.forward(o, p, &r);
        let f1_out = o.add(&t, f1);
        // top-down
        let r = o.relu(&f22);
        let t = self.up_f22.forward(o, p, &r);
        let f23 = o.sub(&f1_out, &t);
        let r = o.relu(&f23);
        let t = self.down_f23.forward(o, p, &r);
        let f2_out = o.add(&t, &f22);
        let r = o.relu(f3);
        let t = self.up_f3.forward(o, p, &r);
        let f31 = o.sub(&f2_out, &t);
        let r = o.relu(&f31);
        let t = self.down_f31.forward(o, p, &r);
        let f3_out = o.add(&t, f3);
        Ok([f1_out, f2_out, f3_out])
    }
}

/// Pyramid levels must halve in size and double in depth.
pub(crate) fn check_pyramid<O: ParamOps>(o: &O, f: &[O::V; 3]) -> Result<()> {
    let s: Vec<_> = f.iter().map(|v| o.value(v).shape()).collect();
    let ok = s[0].n == s[1].n
        && s[1].n == s[2].n
        && s[1].c == 2 * s[0].c
        && s[2].c == 4 * s[0].c
        && s[0].h == 2 * s[1].h
        && s[0].w == 2 * s[1].w
        && s[1].h == 2 * s[2].h
        && s[1].w == 2 * s[2].w;
    if ok {
        Ok(())
    } else {
        Err(Error::Invariant(format!(
            "feature pyramid levels {}, {}, {} do not follow the 1, 1/2, 1/4 scale and C, 2C, 4C depth contract",
            s[0], s[1], s[2]
        )))
    }
}

/// Residual dense block: densely connected 3x3 conv + ReLU layers, a 1x1
/// fusion back to the input width, and an identity skip.
#[derive(Clone, Debug)]
pub struct Feb {
    pub dense: Vec<Conv>,
    pub fuse: Conv,
}

impl Feb {
    pub fn new(b: &mut ParamBuilder, name: &str, width: usize, layers: usize, growth: usize) -> Self {
        let dense = (0..layers)
            .map(|l| b.conv(&format!("{name}.dense.{l}"), width + l * growth, growth, SAME_REFLECT))
            .collect();
        let fuse = b.conv(&format!("{name}.fuse"), width + layers * growth, width, POINTWISE);
        Self { dense, fuse }
    }

    pub fn forward<O: ParamOps>(&self, o: &mut O, p: &mut Binder<'_, O::V>, x: &O::V) -> O::V {
        let mut cat = x.clone();
        for layer in &self.dense {
            let y = layer.forward(o, p, &cat);
            let y = o.relu(&y);
            cat = o.concat(&cat, &y);
        }
        let fused = self.fuse.forward(o, p, &cat);
        o.add(x, &fused)
    }
}

/// Feature attention: channel attention followed by pixel attention.
#[derive(Clone, Debug)]
pub struct Fab {
    pub ca_reduce: Conv,
    pub ca_expand: Conv,
    pub pa_reduce: Conv,
    pub pa_out: Conv,
}

impl Fab {
    pub fn new(b: &mut ParamBuilder, name: &str, width: usize, reduction: usize) -> Self {
        let mid = (width / reduction.max(1)).max(1);
        Self {
            ca_reduce: b.conv(&format!("{name}.ca.reduce"), width, mid, POINTWISE),
            ca_expand: b.conv(&format!("{name}.ca.expand"), mid, width, POINTWISE),
            pa_reduce: b.conv(&format!("{name}.pa.reduce"), width, mid, POINTWISE),
            pa_out: b.conv(&format!("{name}.pa.out"), mid, 1, POINTWISE),
        }
    }

    pub fn forward<O: ParamOps>(&self, o: &mut O, p: &mut Binder<'_, O::V>, x: &O::V) -> O::V {
        let pooled = o.global_avg_pool(x);
        let a = self.ca_reduce.forward(o, p, &pooled);
        let a = o.relu(&a);
        let a = self.ca_expand.forward(o, p, &a);
        let gate = o.sigmoid(&a);
        let x = o.mul_channel(x, &gate);
        let a = self.pa_reduce.forward(o, p, &x);
        let a = o.relu(&a);
        let a = self.pa_out.forward(o, p, &a);
        let gate = o.sigmoid(&a);
        o.mul_pixel(&x, &gate)
    }
}
