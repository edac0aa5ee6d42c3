//! The hierarchical dehazing network.
//!
//! Three stages, all operating on a three-level feature pyramid at scales
//! 1, 1/2 and 1/4 with depths C, 2C and 4C:
//!
//! 1. a hierarchical feature extractor (three strided stems, each followed by
//!    a deformable convolution),
//! 2. a stack of interaction sub-modules, each a hierarchical fusion block
//!    followed by per-branch residual dense blocks and a residual skip,
//! 3. a multi-output reconstruction head that refines each branch with
//!    feature attention and emits a dehazed image per scale.

mod blocks;
mod params;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Eager, Ops};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use blocks::{DeformConv, Extractor, Fab, Feb, HfeBranch, Hfb, DOWN2, POINTWISE, SAME_REFLECT, SAME_ZERO};
pub use params::{
    init_xavier, Binder, Conv, NetworkWeights, ParamBuilder, ParamId, ParamOps, ParamRole, ParamSpec, TransConv,
};

/// Architecture hyperparameters and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Depth C of the full-resolution branch; the others use 2C and 4C.
    pub base_width: usize,
    pub him_submodules: usize,
    pub febs_per_branch: usize,
    pub feb_layers: usize,
    pub feb_growth: usize,
    pub fab_reduction: usize,
    pub use_dcn: bool,
    pub use_hfb: bool,
    /// Consumed by the training objective; has no effect on the layout.
    pub use_hcl: bool,
    /// Add the (resized) input image to every reconstruction head.
    pub global_residual: bool,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            him_submodules: 3,
            febs_per_branch: 1,
            feb_layers: 4,
            feb_growth: 48,
            fab_reduction: 8,
            use_dcn: true,
            use_hfb: true,
            use_hcl: true,
            global_residual: true,
            rng_seed: 0,
        }
    }
}

/// The four ablation settings: baseline, +DCN, +HFB, +HCL.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Variant1,
    Variant2,
    Variant3,
    Hcd,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Variant1, Variant::Variant2, Variant::Variant3, Variant::Hcd];

    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::Variant1 => (false, false, false),
            Variant::Variant2 => (true, false, false),
            Variant::Variant3 => (true, true, false),
            Variant::Hcd => (true, true, true),
        }
    }
}

impl ModelConfig {
    /// Small layout for desk-scale training and tests.
    pub fn toy(base_width: usize, him_submodules: usize) -> Self {
        Self {
            base_width,
            him_submodules,
            feb_growth: (base_width * 3 / 2).max(1),
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        (self.use_dcn, self.use_hfb, self.use_hcl) = v.flags();
        self
    }

    pub fn variant(&self) -> Variant {
        match (self.use_dcn, self.use_hfb, self.use_hcl) {
            (false, false, false) => Variant::Variant1,
            (true, false, false) => Variant::Variant2,
            (true, true, false) => Variant::Variant3,
            _ => Variant::Hcd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_width", self.base_width),
            ("him_submodules", self.him_submodules),
            ("febs_per_branch", self.febs_per_branch),
            ("feb_growth", self.feb_growth),
            ("fab_reduction", self.fab_reduction),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{k} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Channel depth of pyramid level `k`.
    pub fn depth(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Clone, Debug)]
pub struct HimBlock {
    pub hfb: Option<Hfb>,
    /// `febs[branch]` is applied in order.
    pub febs: [Vec<Feb>; 3],
}

#[derive(Clone, Debug)]
pub struct Moirm {
    pub fab: [Fab; 3],
    pub head: [Conv; 3],
}

/// Network layout: parameter handles for every layer, built from a config.
#[derive(Clone, Debug)]
pub struct Hdn {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    pub hfe: [HfeBranch; 3],
    pub him: Vec<HimBlock>,
    pub moirm: Moirm,
}

impl Hdn {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new();
        let c = &config;
        let hfe = [0, 1, 2].map(|k| HfeBranch::new(&mut b, &format!("hfe.{k}"), k, c.depth(k), c.use_dcn));
        let him = (0..c.him_submodules)
            .map(|m| {
                let hfb = c.use_hfb.then(|| Hfb::new(&mut b, &format!("him.{m}.hfb"), c.base_width));
                let febs = [0, 1, 2].map(|k| {
                    (0..c.febs_per_branch)
                        .map(|i| Feb::new(&mut b, &format!("him.{m}.feb.{k}.{i}"), c.depth(k), c.feb_layers, c.feb_growth))
                        .collect()
                });
                HimBlock { hfb, febs }
            })
            .collect();
        // FAB inputs: level 3 alone, then upsampled coarser FAB output
        // concatenated with the finer HIM output.
        let fab_in = [7 * c.base_width, 6 * c.base_width, 4 * c.base_width];
        let fab = [0, 1, 2].map(|k| Fab::new(&mut b, &format!("moirm.fab.{k}"), fab_in[k], c.fab_reduction));
        let head = [0, 1, 2].map(|k| b.conv(&format!("moirm.head.{k}"), fab_in[k], 3, SAME_REFLECT));
        Ok(Self {
            config,
            specs: b.into_specs(),
            hfe,
            him,
            moirm: Moirm { fab, head },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Xavier-uniform weights seeded from `config.rng_seed`.
    pub fn init_weights(&self) -> NetworkWeights {
        init_xavier(&self.specs, self.config.rng_seed)
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(|s| s.shape.len()).sum()
    }

    /// Parameter totals grouped by module path (`hfe.0`, `him.1`, `moirm.fab`, ...).
    pub fn param_table(&self) -> Vec<(String, usize)> {
        let mut rows: Vec<(String, usize)> = Vec::new();
        for s in &self.specs {
            let key: String = s.name.split('.').take(2).collect::<Vec<_>>().join(".");
            match rows.last_mut() {
                Some((k, n)) if *k == key => *n += s.shape.len(),
                _ => rows.push((key, s.shape.len())),
            }
        }
        rows
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = input.shape();
        if s.c != 3 {
            return Err(Error::invalid(format!("network input needs 3 channels, got {}", s.c)));
        }
        if s.h % 4 != 0 || s.w % 4 != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::invalid(format!(
                "network input {}x{} must have height and width divisible by 4",
                s.h, s.w
            )));
        }
        Ok(())
    }

    /// Hierarchical feature extraction: `(C, H, W)`, `(2C, H/2, W/2)`, `(4C, H/4, W/4)`.
    pub fn extract<O: ParamOps>(&self, o: &mut O, p: &mut Binder<'_, O::V>, x: &O::V) -> Result<[O::V; 3]> {
        self.check_input(o.value(x))?;
        Ok([0, 1, 2].map(|k| self.hfe[k].forward(o, p, x)))
    }

    /// One interaction sub-module: fusion, per-branch enhancement, residual skip.
    pub fn interact<O: ParamOps>(
        &self,
        o: &mut O,
        p: &mut Binder<'_, O::V>,
        block: &HimBlock,
        f: [O::V; 3],
    ) -> Result<[O::V; 3]> {
        blocks::check_pyramid(o, &f)?;
        let fused = match &block.hfb {
            Some(h) => h.forward(o, p, &f)?,
            None => f.clone(),
        };
        let mut out = Vec::with_capacity(3);
        for (k, mut y) in fused.into_iter().enumerate() {
            for feb in &block.febs[k] {
                y = feb.forward(o, p, &y);
            }
            out.push(o.add(&y, &f[k]));
        }
        Ok(out.try_into().ok().expect("three branches"))
    }

    /// Multi-output reconstruction from the final pyramid. `residual[k]` is
    /// added to head `k` when the global residual is enabled.
    pub fn reconstruct<O: ParamOps>(
        &self,
        o: &mut O,
        p: &mut Binder<'_, O::V>,
        h: &[O::V; 3],
        residual: &[O::V; 3],
    ) -> [O::V; 3] {
        let m = &self.moirm;
        let f3 = m.fab[2].forward(o, p, &h[2]);
        let s2 = o.value(&h[1]).shape();
        let up = o.resize(&f3, s2.h, s2.w);
        let cat = o.concat(&up, &h[1]);
        let f2 = m.fab[1].forward(o, p, &cat);
        let s1 = o.value(&h[0]).shape();
        let up = o.resize(&f2, s1.h, s1.w);
        let cat = o.concat(&up, &h[0]);
        let f1 = m.fab[0].forward(o, p, &cat);
        let outs = [f1, f2, f3];
        let mut images = Vec::with_capacity(3);
        for k in 0..3 {
            let a = m.head[k].forward(o, p, &outs[k]);
            images.push(if self.config.global_residual { o.add(&a, &residual[k]) } else { a });
        }
        images.try_into().ok().expect("three heads")
    }

    /// Full forward pass. Returns the dehazed images at scales 1, 1/2, 1/4.
    pub fn forward<O: ParamOps>(&self, o: &mut O, p: &mut Binder<'_, O::V>, x: &O::V) -> Result<[O::V; 3]> {
        let mut f = self.extract(o, p, x)?;
        for block in &self.him {
            f = self.interact(o, p, block, f)?;
        }
        let residual = [1, 2, 4].map(|k| o.area_down(x, k));
        Ok(self.reconstruct(o, p, &f, &residual))
    }

    /// Eager inference returning `(A1, A2, A3)`.
    pub fn dehaze(&self, weights: &NetworkWeights, input: &Tensor) -> Result<[Tensor; 3]> {
        weights.check_layout(&self.specs)?;
        let mut o = Eager;
        let mut p = Binder::frozen(weights);
        let x = o.constant(input.clone());
        let out = self.forward(&mut o, &mut p, &x)?;
        Ok(out.map(|v| Rc::try_unwrap(v).unwrap_or_else(|rc| (*rc).clone())))
    }

    /// Inference on any size: reflect-pads height and width up to multiples
    /// of 4, runs [`Hdn::dehaze`], and crops every scale back to
    /// `ceil(h / 2^k) x ceil(w / 2^k)`.
    pub fn dehaze_padded(&self, weights: &NetworkWeights, input: &Tensor) -> Result<[Tensor; 3]> {
        let s = input.shape();
        if s.h == 0 || s.w == 0 {
            return Err(Error::invalid("cannot dehaze an empty image"));
        }
        let (ph, pw) = (s.h.div_ceil(4) * 4, s.w.div_ceil(4) * 4);
        if (ph, pw) == (s.h, s.w) {
            return self.dehaze(weights, input);
        }
        let padded = input.pad_reflect_to(ph, pw);
        let out = self.dehaze(weights, &padded)?;
        let mut cropped = Vec::with_capacity(3);
        for (k, a) in out.into_iter().enumerate() {
            cropped.push(a.crop(0, 0, s.h.div_ceil(1 << k), s.w.div_ceil(1 << k))?);
        }
        Ok(cropped.try_into().expect("three scales"))
    }

    /// Eager feature extraction.
    pub fn extract_features(&self, weights: &NetworkWeights, input: &Tensor) -> Result<[Tensor; 3]> {
        let mut o = Eager;
        let mut p = Binder::frozen(weights);
        let x = o.constant(input.clone());
        let f = self.extract(&mut o, &mut p, &x)?;
        Ok(f.map(|v| (*v).clone()))
    }
}

/// Build the layout for `config` and draw its initial weights.
pub fn init_weights(config: &ModelConfig) -> Result<(Hdn, NetworkWeights)> {
    let net = Hdn::new(config.clone())?;
    let w = net.init_weights();
    Ok((net, w))
}

/// Exact total scalar parameter count.
pub fn param_count(weights: &NetworkWeights) -> usize {
    weights.param_count()
}

/// Standalone block with its own weights, for evaluating a single block
/// outside the full network.
pub struct Standalone<B> {
    pub block: B,
    pub specs: Vec<ParamSpec>,
}

impl<B> Standalone<B> {
    pub fn build(f: impl FnOnce(&mut ParamBuilder) -> B) -> Self {
        let mut b = ParamBuilder::new();
        let block = f(&mut b);
        Self {
            block,
            specs: b.into_specs(),
        }
    }

    pub fn init(&self, seed: u64) -> NetworkWeights {
        init_xavier(&self.specs, seed)
    }
}

/// Eager HFB on a concrete pyramid.
pub fn hfb_forward(hfb: &Hfb, weights: &NetworkWeights, f: &[Tensor; 3]) -> Result<[Tensor; 3]> {
    let mut o = Eager;
    let mut p = Binder::frozen(weights);
    let f = f.clone().map(|t| o.constant(t));
    let y = hfb.forward(&mut o, &mut p, &f)?;
    Ok(y.map(|v| (*v).clone()))
}

pub fn feb_forward(feb: &Feb, weights: &NetworkWeights, x: &Tensor) -> Tensor {
    let mut o = Eager;
    let mut p = Binder::frozen(weights);
    let x = o.constant(x.clone());
    (*feb.forward(&mut o, &mut p, &x)).clone()
}

pub fn fab_forward(fab: &Fab, weights: &NetworkWeights, x: &Tensor) -> Tensor {
    let mut o = Eager;
    let mut p = Binder::frozen(weights);
    let x = o.constant(x.clone());
    (*fab.forward(&mut o, &mut p, &x)).clone()
}
