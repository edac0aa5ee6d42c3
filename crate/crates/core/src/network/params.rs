//! Named parameter storage and Xavier initialization.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Grads, Ops, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{ConvGeom, Padding};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    /// Convolution or transposed-convolution kernel, Xavier-uniform.
    Kernel,
    Bias,
    /// Deformable-convolution offset predictor, zero at init.
    Offset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub role: ParamRole,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl ParamSpec {
    pub fn xavier_bound(&self) -> f64 {
        (6.0 / (self.fan_in + self.fan_out) as f64).sqrt()
    }
}

/// Declares parameters while a network layout is being built.
#[derive(Default)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn declare(&mut self, spec: ParamSpec) -> ParamId {
        debug_assert!(
            self.specs.iter().all(|s| s.name != spec.name),
            "duplicate parameter {}",
            spec.name
        );
        self.specs.push(spec);
        ParamId(self.specs.len() - 1)
    }

    fn bias(&mut self, name: String, cout: usize, role: ParamRole) -> ParamId {
        self.declare(ParamSpec {
            name,
            shape: Shape::new(cout, 1, 1, 1),
            role,
            fan_in: 1,
            fan_out: 1,
        })
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Conv {
        let k = geom.kernel;
        let weight = self.declare(ParamSpec {
            name: format!("{name}.weight"),
            shape: Shape::new(cout, cin, k, k),
            role: ParamRole::Kernel,
            fan_in: cin * k * k,
            fan_out: cout * k * k,
        });
        let bias = self.bias(format!("{name}.bias"), cout, ParamRole::Bias);
        Conv { weight, bias, geom }
    }

    /// A zero-initialized convolution (used for deformable offsets).
    pub fn offset_conv(&mut self, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Conv {
        let k = geom.kernel;
        let weight = self.declare(ParamSpec {
            name: format!("{name}.weight"),
            shape: Shape::new(cout, cin, k, k),
            role: ParamRole::Offset,
            fan_in: cin * k * k,
            fan_out: cout * k * k,
        });
        let bias = self.bias(format!("{name}.bias"), cout, ParamRole::Offset);
        Conv { weight, bias, geom }
    }

    /// 4x4 stride-2 transposed convolution that doubles the spatial size.
    pub fn trans_conv(&mut self, name: &str, cin: usize, cout: usize) -> TransConv {
        let k = 4;
        let weight = self.declare(ParamSpec {
            name: format!("{name}.weight"),
            shape: Shape::new(cin, cout, k, k),
            role: ParamRole::Kernel,
            fan_in: cout * k * k,
            fan_out: cin * k * k,
        });
        let bias = self.bias(format!("{name}.bias"), cout, ParamRole::Bias);
        TransConv { weight, bias }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Xavier-uniform kernels, zero biases, zero offset predictors.
///
/// Values are drawn in declaration order from a ChaCha8 stream seeded with
/// `seed`, so a given layout and seed always produce identical weights.
pub fn init_xavier(specs: &[ParamSpec], seed: u64) -> NetworkWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(specs.len());
    for spec in specs {
        let t = match spec.role {
            ParamRole::Kernel => {
                let b = spec.xavier_bound();
                let data = (0..spec.shape.len()).map(|_| rng.random_range(-b..=b)).collect();
                Tensor::from_vec(spec.shape, data).expect("spec shape")
            }
            ParamRole::Bias | ParamRole::Offset => Tensor::zeros(spec.shape),
        };
        entries.push((spec.name.clone(), t));
    }
    NetworkWeights::from_entries(entries)
}

/// Ordered collection of named parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl NetworkWeights {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        let index = entries.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Self { entries, index }
    }

    pub fn empty() -> Self {
        Self::from_entries(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Zero every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut hit = 0;
        for (n, t) in &mut self.entries {
            if n.starts_with(prefix) {
                t.data_mut().fill(0.0);
                hit += 1;
            }
        }
        hit
    }

    /// A copy with every tensor filled with zeros.
    pub fn zeros_like(&self) -> Self {
        Self::from_entries(
            self.entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        )
    }

    /// Check that names and shapes match a declared layout.
    pub fn check_layout(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.entries.len() {
            return Err(Error::Config(format!(
                "weights hold {} tensors but the model declares {}",
                self.entries.len(),
                specs.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(&self.entries) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(Error::Config(format!(
                    "weight {name} {} does not match declared {} {}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

/// Hands out backend values for parameters, registering each at most once.
pub struct Binder<'w, V> {
    weights: &'w NetworkWeights,
    bound: Vec<Option<V>>,
    trainable: bool,
}

impl<'w, V: Clone> Binder<'w, V> {
    /// Parameters bound this way receive gradients on a [`Tape`].
    pub fn trainable(weights: &'w NetworkWeights) -> Self {
        Self {
            weights,
            bound: vec![None; weights.len()],
            trainable: true,
        }
    }

    pub fn frozen(weights: &'w NetworkWeights) -> Self {
        Self {
            weights,
            bound: vec![None; weights.len()],
            trainable: false,
        }
    }

    pub fn get<O: Ops<V = V> + ParamOps>(&mut self, ops: &mut O, id: ParamId) -> V {
        if let Some(v) = &self.bound[id.0] {
            return v.clone();
        }
        let t = self.weights.get(id).clone();
        let v = if self.trainable { ops.parameter(t) } else { ops.constant(t) };
        self.bound[id.0] = Some(v.clone());
        v
    }
}

impl Binder<'_, Var> {
    /// Gradients for every parameter in declaration order; unused ones are zero.
    pub fn collect(&self, grads: &Grads) -> Vec<Tensor> {
        self.bound
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.weights.get(ParamId(i)).shape()))
            })
            .collect()
    }
}

/// Backends that can introduce trainable leaves.
pub trait ParamOps: Ops {
    fn parameter(&mut self, t: Tensor) -> Self::V;
}

impl ParamOps for Tape {
    fn parameter(&mut self, t: Tensor) -> Var {
        self.variable(t)
    }
}

impl ParamOps for crate::autograd::Eager {
    fn parameter(&mut self, t: Tensor) -> Self::V {
        self.constant(t)
    }
}

/// Convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl Conv {
    pub fn forward<O: ParamOps>(&self, o: &mut O, p: &mut Binder<'_, O::V>, x: &O::V) -> O::V {
        let w = p.get(o, self.weight);
        let b = p.get(o, self.bias);
        o.conv2d(x, &w, Some(&b), self.geom)
    }
}

/// 4x4 stride-2 transposed convolution with bias.
#[derive(Clone, Debug)]
pub struct TransConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl TransConv {
    pub const GEOM: ConvGeom = ConvGeom::new(4, 2, 1, Padding::Zero);

    pub fn forward<O: ParamOps>(&self, o: &mut O, p: &mut Binder<'_, O::V>, x: &O::V) -> O::V {
        let w = p.get(o, self.weight);
        let b = p.get(o, self.bias);
        o.conv_transpose2d(x, &w, Some(&b), Self::GEOM)
    }
}
