use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bitops::ScaledBinaryWeights;
use crate::error::{Error, Result};
use crate::graph::{Graph, Op};
use crate::tensor::{Shape, Tensor, BN_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Real,
    /// Master weights of a binarized convolution; kept in [-1, 1].
    Binary,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub kind: ParamKind,
    pub frozen: bool,
    /// Running average of squared gradients (optimizer state).
    pub sq_avg: Vec<f32>,
}

impl Param {
    pub fn new(value: Tensor, kind: ParamKind) -> Self {
        let grad = Tensor::zeros(value.shape());
        let sq_avg = vec![0.0; value.len()];
        Param { value, grad, kind, frozen: false, sq_avg }
    }
}

/// Batch-norm values needed to run one normalization layer.
#[derive(Clone, Debug)]
pub struct BnView<'a> {
    pub scale: &'a [f32],
    pub shift: &'a [f32],
    pub mean: &'a [f32],
    pub var: &'a [f32],
    pub eps: f32,
    pub frozen: bool,
}

/// Named parameters, running statistics and cached packed weights.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
    buffers: IndexMap<String, Vec<f32>>,
    packed: HashMap<String, ScaledBinaryWeights>,
}

/// 64-bit FNV-1a; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Deterministic per-parameter RNG stream: the same `(seed, name)` always
/// yields the same values, independent of how many other parameters exist.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a(name.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// He-normal convolution weights and identity batch norms for every
    /// layer of `graph`.
    pub fn init_for(graph: &Graph, seed: u64) -> Self {
        let mut store = ParamStore::new();
        store.init_missing(graph, seed);
        store
    }

    /// Initializes only layers not already present.
    pub fn init_missing(&mut self, graph: &Graph, seed: u64) {
        for node in graph.nodes() {
            match &node.op {
                Op::Conv { conv, weight, binary } => {
                    if self.params.contains_key(weight) {
                        continue;
                    }
                    let fan_in = conv.in_channels * conv.kernel * conv.kernel;
                    let std = (2.0 / fan_in as f32).sqrt();
                    let mut w = Tensor::randn(conv.weight_shape(), std, &mut param_rng(seed, weight));
                    let kind = if *binary {
                        w = w.map(|v| v.clamp(-1.0, 1.0));
                        ParamKind::Binary
                    } else {
                        ParamKind::Real
                    };
                    self.insert(weight.clone(), Param::new(w, kind));
                }
                Op::BatchNorm { name } => {
                    if self.params.contains_key(&format!("{name}.scale")) {
                        continue;
                    }
                    self.insert_batchnorm(name, node.channels);
                }
                _ => {}
            }
        }
    }

    pub fn insert_batchnorm(&mut self, name: &str, channels: usize) {
        let shape = Shape::new(channels, 1, 1, 1);
        self.insert(format!("{name}.scale"), Param::new(Tensor::full(shape, 1.0), ParamKind::Real));
        self.insert(format!("{name}.shift"), Param::new(Tensor::zeros(shape), ParamKind::Real));
        self.buffers.insert(format!("{name}.mean"), vec![0.0; channels]);
        self.buffers.insert(format!("{name}.var"), vec![1.0; channels]);
        self.buffers.insert(format!("{name}.eps"), vec![BN_EPS]);
    }

    pub fn insert(&mut self, name: String, param: Param) {
        self.packed.remove(&name);
        self.params.insert(name, param);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.packed.remove(name);
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    /// Mutable access to every parameter. Drops cached packed weights.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.packed.clear();
        self.params.iter_mut()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn buffer(&self, name: &str) -> Result<&[f32]> {
        self.buffers.get(name).map(|v| v.as_slice()).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Vec<f32>> {
        self.buffers.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn batchnorm(&self, name: &str) -> Result<BnView<'_>> {
        let scale = self.get(&format!("{name}.scale"))?;
        Ok(BnView {
            scale: scale.value.data(),
            shift: self.value(&format!("{name}.shift"))?.data(),
            mean: self.buffer(&format!("{name}.mean"))?,
            var: self.buffer(&format!("{name}.var"))?,
            eps: self.buffer(&format!("{name}.eps"))?[0],
            frozen: scale.frozen,
        })
    }

    /// Overwrites a normalization layer with an exact affine map `a * x + b`.
    pub fn set_batchnorm_affine(&mut self, name: &str, a: &[f32], b: &[f32]) -> Result<()> {
        let c = a.len();
        let shape = Shape::new(c, 1, 1, 1);
        self.get_mut(&format!("{name}.scale"))?.value = Tensor::new(shape, a.to_vec())?;
        self.get_mut(&format!("{name}.shift"))?.value = Tensor::new(shape, b.to_vec())?;
        *self.buffer_mut(&format!("{name}.mean"))? = vec![0.0; c];
        *self.buffer_mut(&format!("{name}.var"))? = vec![1.0; c];
        *self.buffer_mut(&format!("{name}.eps"))? = vec![0.0];
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Freezes (or thaws) every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        self.set_frozen("", frozen);
    }

    /// Concatenated values of every parameter under `prefix`, in store order.
    pub fn snapshot(&self, prefix: &str) -> Vec<f32> {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .flat_map(|(_, p)| p.value.data().iter().copied())
            .collect()
    }

    pub fn packed(&self, name: &str) -> Option<&ScaledBinaryWeights> {
        self.packed.get(name)
    }

    /// Installs exact packed weights for a binary layer. The master weights
    /// become their dense expansion so that every execution path agrees.
    pub fn set_packed(&mut self, name: &str, weights: ScaledBinaryWeights) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if p.value.shape() != weights.shape() {
            return Err(Error::shape("set_packed", format!("{} vs {}", p.value.shape(), weights.shape())));
        }
        p.value = weights.to_dense();
        self.packed.insert(name.to_string(), weights);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvParams;

    fn tiny_graph() -> Graph {
        let mut g = Graph::new();
        let x = g.input(2);
        let b = g.batchnorm(x, "bn");
        let c = g.conv(b, ConvParams::same(2, 3, 3), "conv", true).unwrap();
        g.set_outputs(vec![c]);
        g
    }

    #[test]
    fn init_is_deterministic_and_name_keyed() {
        let g = tiny_graph();
        let a = ParamStore::init_for(&g, 5);
        let b = ParamStore::init_for(&g, 5);
        assert_eq!(a.snapshot(""), b.snapshot(""));
        let c = ParamStore::init_for(&g, 6);
        assert_ne!(a.snapshot("conv"), c.snapshot("conv"));
        assert_eq!(a.get("conv").unwrap().kind, ParamKind::Binary);
        assert!(a.value("conv").unwrap().data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(a.batchnorm("bn").unwrap().scale, &[1.0, 1.0]);
        assert!(matches!(a.get("nope"), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn freeze_by_prefix() {
        let mut s = ParamStore::init_for(&tiny_graph(), 1);
        s.set_frozen("bn", true);
        assert!(s.get("bn.scale").unwrap().frozen && !s.get("conv").unwrap().frozen);
        assert!(s.batchnorm("bn").unwrap().frozen);
    }
}
