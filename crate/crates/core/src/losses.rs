//! Training objectives: multi-scale Charbonnier and the hierarchical
//! contrastive loss.
//!
//! The contrastive loss only ever sees three `(output, positive, negative)`
//! image triples, so any model that produces three scales can use it. Every
//! loss is written once against [`Ops`]; the plain-tensor entry points run it
//! eagerly or on a private tape.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Eager, Ops, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{ConvGeom, Padding};
use crate::tensor::{Shape, Tensor};

/// Floor on the negative distance in the contrastive denominator.
pub const NEG_DISTANCE_FLOOR: f64 = 1e-7;

const ZERO_SAME: ConvGeom = ConvGeom::new(3, 1, 1, Padding::Zero);
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Multi-scale Charbonnier: mean of `sqrt(r^2 + eps^2)` per scale, averaged
/// over the three scales. The constant `eps` floor is added once at the end
/// so a perfect reconstruction scores exactly `eps`.
pub fn charbonnier_op<O: Ops>(o: &mut O, outputs: &[O::V; 3], targets: &[O::V; 3], eps: f64) -> Result<O::V> {
    for k in 0..3 {
        o.value(&outputs[k]).expect_same_shape("charbonnier", o.value(&targets[k]))?;
    }
    let terms: Vec<O::V> = (0..3).map(|k| o.charbonnier(&outputs[k], &targets[k], eps)).collect();
    let s = o.sum(&terms);
    let excess = o.scale(&s, 1.0 / 3.0);
    let floor = o.constant(Tensor::scalar(eps));
    Ok(o.add(&excess, &floor))
}

pub fn charbonnier_loss(outputs: &[Tensor; 3], targets: &[Tensor; 3], eps: f64) -> Result<f64> {
    let mut o = Eager;
    let a = outputs.clone().map(|t| o.constant(t));
    let p = targets.clone().map(|t| o.constant(t));
    Ok(charbonnier_op(&mut o, &a, &p, eps)?.data()[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerceptualBackend {
    /// The image itself is the only feature, coefficient 1.
    Identity,
    /// Three fixed random 3x3 conv + ReLU stages. Needs no files.
    RandomTiny,
    /// VGG-19 `features` weights from a safetensors file.
    Vgg19,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptualConfig {
    pub backend: PerceptualBackend,
    /// Required for `vgg19`.
    pub weights_path: Option<PathBuf>,
    /// Seed of the `random-tiny` weights.
    pub seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            backend: PerceptualBackend::RandomTiny,
            weights_path: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Conv { weight: Tensor, bias: Tensor },
    Relu,
    Pool,
    /// Emit the current activation as a feature.
    Tap,
}

/// A frozen feature extractor with per-tap distance coefficients.
#[derive(Clone, Debug)]
pub struct PerceptualEncoder {
    backend: PerceptualBackend,
    layers: Vec<Layer>,
    coefficients: Vec<f64>,
    normalize: bool,
}

/// VGG-19 `features` layout: conv widths, `0` marks a 2x2 max pool.
const VGG19_CFG: [usize; 21] = [
    64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512, 0,
];
/// 1-based conv numbers whose ReLU outputs are tapped.
const VGG19_TAPS: [usize; 5] = [1, 3, 5, 9, 13];
const VGG19_COEFFS: [f64; 5] = [1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0];
/// Smallest input side the five taps (four pools) can handle.
const VGG19_MIN_SIDE: usize = 16;

/// Module index in torchvision's `vgg19().features` of every conv up to the
/// last tap, paired with its nominal output width.
fn vgg19_conv_indices() -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut idx = 0;
    for &c in &VGG19_CFG {
        if out.len() == VGG19_TAPS[4] {
            break;
        }
        if c == 0 {
            idx += 1;
        } else {
            out.push((idx, c));
            idx += 2;
        }
    }
    out
}

impl PerceptualEncoder {
    pub fn identity() -> Self {
        Self {
            backend: PerceptualBackend::Identity,
            layers: vec![Layer::Tap],
            coefficients: vec![1.0],
            normalize: false,
        }
    }

    /// Three 3x3 conv + ReLU stages (3 -> 8 -> 8 -> 8 channels) with
    /// Xavier-uniform weights drawn from `seed`, tapped after each stage.
    pub fn random_tiny(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let widths = [3, 8, 8, 8];
        for s in 0..3 {
            let (cin, cout) = (widths[s], widths[s + 1]);
            let bound = (6.0 / ((cin + cout) * 9) as f64).sqrt();
            let weight = Tensor::uniform(Shape::new(cout, cin, 3, 3), -bound, bound, &mut rng);
            let bias = Tensor::from_fn(Shape::new(cout, 1, 1, 1), |_, _, _, _| rng.random_range(-0.1..0.1));
            layers.extend([Layer::Conv { weight, bias }, Layer::Relu, Layer::Tap]);
        }
        Self {
            backend: PerceptualBackend::RandomTiny,
            layers,
            coefficients: vec![0.25, 0.5, 1.0],
            normalize: false,
        }
    }

    /// Load VGG-19 `features.{i}.weight` / `.bias` (f32 or f64) from a
    /// safetensors file. Channel widths follow the file.
    pub fn vgg19(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Config(format!(
                "vgg19 perceptual weights not found at {} (set perceptual.weights_path)",
                path.display()
            )));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let fetch = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let view = st.tensor(name).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: format!("{name}: {e}"),
            })?;
            let data = match view.dtype() {
                safetensors::Dtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect(),
                safetensors::Dtype::F64 => view
                    .data()
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
                other => {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        reason: format!("{name} has dtype {other:?}; expected F32 or F64"),
                    })
                }
            };
            Ok((view.shape().to_vec(), data))
        };
        let mut layers = Vec::new();
        let mut cin = 3;
        let mut conv_no = 0;
        let convs = vgg19_conv_indices();
        for &c in &VGG19_CFG {
            if conv_no == VGG19_TAPS[4] {
                break;
            }
            if c == 0 {
                layers.push(Layer::Pool);
                continue;
            }
            let (idx, _) = convs[conv_no];
            conv_no += 1;
            let (ws, wd) = fetch(&format!("features.{idx}.weight"))?;
            let (bs, bd) = fetch(&format!("features.{idx}.bias"))?;
            if ws.len() != 4 || ws[1] != cin || ws[2] != 3 || ws[3] != 3 || bs != [ws[0]] {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("features.{idx} has weight {ws:?} / bias {bs:?}; expected [*, {cin}, 3, 3]"),
                });
            }
            let cout = ws[0];
            layers.push(Layer::Conv {
                weight: Tensor::from_vec(Shape::new(cout, cin, 3, 3), wd)?,
                bias: Tensor::from_vec(Shape::new(cout, 1, 1, 1), bd)?,
            });
            layers.push(Layer::Relu);
            if VGG19_TAPS.contains(&conv_no) {
                layers.push(Layer::Tap);
            }
            cin = cout;
        }
        Ok(Self {
            backend: PerceptualBackend::Vgg19,
            layers,
            coefficients: VGG19_COEFFS.to_vec(),
            normalize: true,
        })
    }

    pub fn from_config(cfg: &PerceptualConfig) -> Result<Self> {
        match cfg.backend {
            PerceptualBackend::Identity => Ok(Self::identity()),
            PerceptualBackend::RandomTiny => Ok(Self::random_tiny(cfg.seed)),
            PerceptualBackend::Vgg19 => match &cfg.weights_path {
                Some(p) => Self::vgg19(p),
                None => Err(Error::Config(
                    "perceptual.backend = vgg19 needs perceptual.weights_path".into(),
                )),
            },
        }
    }

    pub fn backend(&self) -> PerceptualBackend {
        self.backend
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        if self.backend == PerceptualBackend::Identity {
            return Ok(());
        }
        if s.c != 3 {
            return Err(Error::invalid(format!("perceptual encoder needs 3 channels, got {}", s.c)));
        }
        if self.backend == PerceptualBackend::Vgg19 && s.h.min(s.w) < VGG19_MIN_SIDE {
            return Err(Error::invalid(format!(
                "vgg19 features need at least {VGG19_MIN_SIDE}x{VGG19_MIN_SIDE} inputs, got {}x{}",
                s.h, s.w
            )));
        }
        Ok(())
    }

    /// Encoder weights as backend constants, to be reused across embeddings.
    fn bind<O: Ops>(&self, o: &mut O) -> Vec<Option<(O::V, O::V)>> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv { weight, bias } => Some((o.constant(weight.clone()), o.constant(bias.clone()))),
                _ => None,
            })
            .collect()
    }

    fn embed_bound<O: Ops>(&self, o: &mut O, bound: &[Option<(O::V, O::V)>], x: &O::V) -> Vec<O::V> {
        let mut h = if self.normalize {
            let scale = IMAGENET_STD.map(|s| 1.0 / s);
            o.affine_channels(x, &IMAGENET_MEAN, &scale)
        } else {
            x.clone()
        };
        let mut taps = Vec::with_capacity(self.coefficients.len());
        for (layer, b) in self.layers.iter().zip(bound) {
            h = match layer {
                Layer::Conv { .. } => {
                    let (w, bias) = b.as_ref().expect("bound conv");
                    o.conv2d(&h, w, Some(bias), ZERO_SAME)
                }
                Layer::Relu => o.relu(&h),
                Layer::Pool => o.max_pool2(&h),
                Layer::Tap => {
                    taps.push(h.clone());
                    continue;
                }
            };
        }
        taps
    }

    /// Features at every tap.
    pub fn embed_op<O: Ops>(&self, o: &mut O, x: &O::V) -> Result<Vec<O::V>> {
        self.check_input(o.value(x).shape())?;
        let bound = self.bind(o);
        Ok(self.embed_bound(o, &bound, x))
    }

    pub fn embed(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut o = Eager;
        let xv = o.constant(x.clone());
        Ok(self.embed_op(&mut o, &xv)?.into_iter().map(|v| (*v).clone()).collect())
    }
}

/// Load the encoder described by `cfg`.
pub fn perceptual_embed(img: &Tensor, enc: &PerceptualEncoder) -> Result<Vec<Tensor>> {
    enc.embed(img)
}

/// `sum_l coeff_l * mean|a_l - b_l|`.
fn feature_distance<O: Ops>(o: &mut O, coeffs: &[f64], a: &[O::V], b: &[O::V]) -> O::V {
    let terms: Vec<O::V> = coeffs
        .iter()
        .zip(a.iter().zip(b))
        .map(|(&c, (x, y))| {
            let d = o.mean_abs_diff(x, y);
            o.scale(&d, c)
        })
        .collect();
    o.sum(&terms)
}

fn to_size<O: Ops>(o: &mut O, x: &O::V, h: usize, w: usize) -> O::V {
    let s = o.value(x).shape();
    if (s.h, s.w) == (h, w) {
        x.clone()
    } else {
        o.resize(x, h, w)
    }
}

/// Hierarchical contrastive loss over any number of scales (three in the
/// network; one gives the plain single-scale form).
///
/// All images are resized to the size of the middle positive and embedded
/// once. With `d` the weighted feature distance,
/// `L = sum_i (sum_j d(A_i, P_j)) * (sum_k 1 / max(d(A_i, N_k), 1e-7))`.
pub fn hcl_op<O: Ops>(
    o: &mut O,
    enc: &PerceptualEncoder,
    outputs: &[O::V],
    positives: &[O::V],
    negatives: &[O::V],
) -> Result<O::V> {
    let scales = outputs.len();
    if scales == 0 || positives.len() != scales || negatives.len() != scales {
        return Err(Error::invalid(format!(
            "contrastive loss needs equally many outputs, positives and negatives (got {}, {}, {})",
            scales,
            positives.len(),
            negatives.len()
        )));
    }
    for k in 0..scales {
        let a = o.value(&outputs[k]);
        a.expect_same_shape("contrastive positive", o.value(&positives[k]))?;
        a.expect_same_shape("contrastive negative", o.value(&negatives[k]))?;
    }
    let mid = o.value(&positives[scales / 2]).shape();
    let (n, c) = (mid.n, mid.c);
    for v in outputs {
        let s = o.value(v).shape();
        if (s.n, s.c) != (n, c) {
            return Err(Error::shape("contrastive scales", s, mid));
        }
    }
    enc.check_input(Shape::new(n, c, mid.h, mid.w))?;
    let bound = enc.bind(o);
    let embed = |o: &mut O, x: &O::V| {
        let r = to_size(o, x, mid.h, mid.w);
        enc.embed_bound(o, &bound, &r)
    };
    let fa: Vec<Vec<O::V>> = outputs.iter().map(|x| embed(o, x)).collect();
    let fp: Vec<Vec<O::V>> = positives.iter().map(|x| embed(o, x)).collect();
    let fn_: Vec<Vec<O::V>> = negatives.iter().map(|x| embed(o, x)).collect();
    let coeffs = enc.coefficients();
    let mut terms = Vec::with_capacity(scales);
    for a in &fa {
        let pos: Vec<O::V> = fp.iter().map(|p| feature_distance(o, coeffs, a, p)).collect();
        let num = o.sum(&pos);
        let neg: Vec<O::V> = fn_
            .iter()
            .map(|q| {
                let d = feature_distance(o, coeffs, a, q);
                o.recip_floor(&d, NEG_DISTANCE_FLOOR)
            })
            .collect();
        let den = o.sum(&neg);
        terms.push(o.mul_scalar(&num, &den));
    }
    Ok(o.sum(&terms))
}

pub fn hcl_loss(enc: &PerceptualEncoder, outputs: &[Tensor], positives: &[Tensor], negatives: &[Tensor]) -> Result<f64> {
    let mut o = Eager;
    let [a, p, n] = [outputs, positives, negatives].map(|xs| xs.iter().map(|t| o.constant(t.clone())).collect::<Vec<_>>());
    Ok(hcl_op(&mut o, enc, &a, &p, &n)?.data()[0])
}

/// Contrastive loss and its gradient with respect to the outputs.
/// Positives, negatives and the encoder are treated as constants.
pub fn hcl_loss_with_grad(
    enc: &PerceptualEncoder,
    outputs: &[Tensor],
    positives: &[Tensor],
    negatives: &[Tensor],
) -> Result<(f64, Vec<Tensor>)> {
    let mut t = Tape::new();
    let a: Vec<Var> = outputs.iter().map(|x| t.variable(x.clone())).collect();
    let p: Vec<Var> = positives.iter().map(|x| t.constant(x.clone())).collect();
    let n: Vec<Var> = negatives.iter().map(|x| t.constant(x.clone())).collect();
    let l = hcl_op(&mut t, enc, &a, &p, &n)?;
    Ok((t.scalar(l), output_grads(&t, l, &a, outputs)))
}

fn output_grads(t: &Tape, root: Var, vars: &[Var], like: &[Tensor]) -> Vec<Tensor> {
    let mut g = t.backward(root);
    vars.iter()
        .zip(like)
        .map(|(v, x)| g.take(*v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect()
}

/// Weighting of the two objective terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub use_hcl: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            epsilon: 1e-3,
            use_hcl: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub char: f64,
    /// Zero when the contrastive term is disabled.
    pub hcl: f64,
    pub total: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

/// Scalar nodes of the objective.
pub struct LossNodes<V> {
    pub total: V,
    pub char: V,
    pub hcl: Option<V>,
}

/// `char + lambda * hcl`, or `char` alone when the contrastive term is off.
pub fn total_op<O: Ops>(
    o: &mut O,
    enc: Option<&PerceptualEncoder>,
    outputs: &[O::V; 3],
    targets: &[O::V; 3],
    negatives: &[O::V; 3],
    cfg: &LossConfig,
) -> Result<LossNodes<O::V>> {
    let char = charbonnier_op(o, outputs, targets, cfg.epsilon)?;
    if !cfg.use_hcl {
        return Ok(LossNodes {
            total: char.clone(),
            char,
            hcl: None,
        });
    }
    let enc = enc.ok_or_else(|| Error::Config("contrastive loss enabled without a perceptual encoder".into()))?;
    let hcl = hcl_op(o, enc, outputs, targets, negatives)?;
    let weighted = o.scale(&hcl, cfg.lambda);
    let total = o.sum(&[char.clone(), weighted]);
    Ok(LossNodes {
        total,
        char,
        hcl: Some(hcl),
    })
}

fn breakdown<O: Ops>(o: &O, nodes: &LossNodes<O::V>, cfg: &LossConfig) -> LossBreakdown {
    let scalar = |v: &O::V| o.value(v).data()[0];
    LossBreakdown {
        char: scalar(&nodes.char),
        hcl: nodes.hcl.as_ref().map_or(0.0, scalar),
        total: scalar(&nodes.total),
        lambda: cfg.lambda,
        epsilon: cfg.epsilon,
    }
}

pub fn total_loss(
    outputs: &[Tensor; 3],
    targets: &[Tensor; 3],
    negatives: &[Tensor; 3],
    cfg: &LossConfig,
    enc: Option<&PerceptualEncoder>,
) -> Result<LossBreakdown> {
    let mut o = Eager;
    let [a, p, n] = [outputs, targets, negatives].map(|xs| xs.clone().map(|t| o.constant(t)));
    let nodes = total_op(&mut o, enc, &a, &p, &n, cfg)?;
    Ok(breakdown(&o, &nodes, cfg))
}

/// Objective and its gradient with respect to the three outputs.
pub fn total_loss_with_grad(
    outputs: &[Tensor; 3],
    targets: &[Tensor; 3],
    negatives: &[Tensor; 3],
    cfg: &LossConfig,
    enc: Option<&PerceptualEncoder>,
) -> Result<(LossBreakdown, [Tensor; 3])> {
    let mut t = Tape::new();
    let a = outputs.clone().map(|x| t.variable(x));
    let p = targets.clone().map(|x| t.constant(x));
    let n = negatives.clone().map(|x| t.constant(x));
    let nodes = total_op(&mut t, enc, &a, &p, &n, cfg)?;
    let b = breakdown(&t, &nodes, cfg);
    let g = output_grads(&t, nodes.total, &a, outputs);
    Ok((b, g.try_into().expect("three scales")))
}

/// Write a VGG-19-shaped safetensors file with random f32 weights and conv
/// widths divided by `shrink`, for exercising the `vgg19` backend without
/// the pretrained download.
pub fn write_random_vgg19(path: &Path, shrink: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    let mut cin = 3;
    for (idx, width) in vgg19_conv_indices() {
        let cout = (width / shrink.max(1)).max(1);
        let bound = (6.0 / ((cin + cout) * 9) as f64).sqrt() as f32;
        let w: Vec<u8> = (0..cout * cin * 9)
            .flat_map(|_| rng.random_range(-bound..bound).to_le_bytes())
            .collect();
        let b: Vec<u8> = (0..cout).flat_map(|_| rng.random_range(-0.05f32..0.05).to_le_bytes()).collect();
        blobs.push((format!("features.{idx}.weight"), vec![cout, cin, 3, 3], w));
        blobs.push((format!("features.{idx}.bias"), vec![cout], b));
        cin = cout;
    }
    let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = blobs
        .iter()
        .map(|(n, s, d)| {
            let v = safetensors::tensor::TensorView::new(safetensors::Dtype::F32, s.clone(), d).expect("sized view");
            (n.clone(), v)
        })
        .collect();
    let bytes = safetensors::serialize(views, &None).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
