//! Hourglass networks: plain, improved (identity skip branches with
//! concatenating merges) and stacked.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{self, Mode, ParamStore, Tape};
use crate::blocks::{elaborate_into, BlockInput, BlockKind, BlockSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Op, PoolKind};
use crate::tensor::{ConvParams, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub block: BlockKind,
    /// Number of downsampling levels inside each hourglass.
    pub hg_depth: usize,
    /// Feature width inside the hourglasses.
    pub base_channels: usize,
    /// Widths after the stem convolution and after the first stem block.
    pub stem_channels: [usize; 2],
    pub input_channels: usize,
    pub num_outputs: usize,
    pub stacks: usize,
    pub improved: bool,
    pub binary: bool,
    pub relu_after_conv: bool,
    pub pool: PoolKind,
}

impl NetworkSpec {
    /// Full-size configuration: 4 levels, 256 (192 for the reduced block) channels, 16 outputs.
    pub fn full(block: BlockKind) -> Self {
        NetworkSpec {
            block,
            hg_depth: 4,
            base_channels: block.full_width(),
            stem_channels: [64, 128],
            input_channels: 3,
            num_outputs: 16,
            stacks: 1,
            improved: false,
            binary: true,
            relu_after_conv: false,
            pool: PoolKind::Max,
        }
    }

    /// Small configuration used for the desk-scale experiments.
    pub fn desk(block: BlockKind, num_outputs: usize) -> Self {
        let base = match block {
            BlockKind::HpmReduced => 48,
            _ => 64,
        };
        NetworkSpec {
            block,
            hg_depth: 2,
            base_channels: base,
            stem_channels: [16, 32],
            input_channels: 3,
            num_outputs,
            stacks: 1,
            improved: false,
            binary: true,
            relu_after_conv: false,
            pool: PoolKind::Max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        let bad = |m: &str| Err(Error::Network(m.to_string()));
        if self.hg_depth == 0 {
            return bad("hg_depth must be at least 1");
        }
        if self.stacks == 0 {
            return bad("stacks must be at least 1");
        }
        if self.base_channels == 0 || self.stem_channels.contains(&0) || self.input_channels == 0 || self.num_outputs == 0
        {
            return bad("channel counts must be positive");
        }
        Ok(())
    }

    /// Input extents must be a multiple of this.
    pub fn input_multiple(&self) -> usize {
        let ms = matches!(self.block, BlockKind::MultiScale | BlockKind::MultiScaleNo1x1);
        4 << (self.hg_depth + usize::from(ms))
    }

    /// Heatmap extents for a square input of side `input`.
    pub fn output_side(&self, input: usize) -> usize {
        input / 4
    }

    fn block_spec(&self, kind: BlockKind, cin: usize, cout: usize) -> BlockSpec {
        BlockSpec { kind, in_channels: cin, out_channels: cout, binary: self.binary, relu_after_conv: self.relu_after_conv }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockRole {
    Stem,
    /// Full-resolution branch of an encoder/decoder level.
    Skip,
    Down,
    Inner,
    Up,
    Post,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockRecord {
    pub prefix: String,
    pub role: BlockRole,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// An elaborated network topology.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub graph: Arc<Graph>,
    pub blocks: Vec<BlockRecord>,
}

impl Network {
    pub fn count_params(&self) -> usize {
        self.graph.count_params()
    }

    /// Name prefixes owned by stage `s` (the stem belongs to stage 0).
    pub fn stage_prefixes(s: usize) -> Vec<String> {
        if s == 0 {
            vec!["stem.".into(), "s0.".into()]
        } else {
            vec![format!("s{s}.")]
        }
    }
}

struct NetBuilder<'a> {
    g: Graph,
    spec: &'a NetworkSpec,
    blocks: Vec<BlockRecord>,
}

fn width(g: &Graph, input: BlockInput) -> usize {
    match input {
        BlockInput::Single(x) => g.channels(x),
        BlockInput::Merge { skip, up } => g.channels(skip) + g.channels(up),
    }
}

impl NetBuilder<'_> {
    fn block(&mut self, input: BlockInput, cout: usize, prefix: String, role: BlockRole) -> Result<NodeId> {
        let cin = width(&self.g, input);
        let spec = self.spec.block_spec(self.spec.block, cin, cout);
        let y = elaborate_into(&mut self.g, input, &spec, &prefix)?;
        self.blocks.push(BlockRecord { prefix, role, in_channels: cin, out_channels: cout });
        Ok(y)
    }

    fn hourglass(&mut self, x: NodeId, level: usize, stage: usize) -> Result<BlockInput> {
        let f = self.spec.base_channels;
        let p = format!("s{stage}.hg{level}");
        let up1 = if self.spec.improved {
            None
        } else {
            Some(self.block(BlockInput::Single(x), f, format!("{p}.up1"), BlockRole::Skip)?)
        };
        let pooled = self.g.pool(x, self.spec.pool);
        let low1 = self.block(BlockInput::Single(pooled), f, format!("{p}.low1"), BlockRole::Down)?;
        let low2 = if level > 1 {
            self.hourglass(low1, level - 1, stage)?
        } else {
            BlockInput::Single(self.block(BlockInput::Single(low1), f, format!("{p}.inner"), BlockRole::Inner)?)
        };
        let low3 = self.block(low2, f, format!("{p}.low3"), BlockRole::Up)?;
        let up2 = self.g.upsample(low3);
        Ok(match up1 {
            Some(u) => BlockInput::Single(self.g.add(u, up2)?),
            None => BlockInput::Merge { skip: x, up: up2 },
        })
    }

    /// Pre-activated 1x1 convolution at feature width.
    fn lin(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let f = self.spec.base_channels;
        let bn = self.g.batchnorm(x, format!("{name}.bn"));
        let a = if self.spec.binary { bn } else { self.g.relu(bn) };
        self.g.conv(a, ConvParams::same(f, f, 1), format!("{name}.conv"), self.spec.binary)
    }
}

/// Builds any valid network spec.
pub fn build_network(spec: &NetworkSpec) -> Result<Network> {
    spec.validate()?;
    let mut b = NetBuilder { g: Graph::new(), spec, blocks: vec![] };
    let [s0, s1] = spec.stem_channels;
    let f = spec.base_channels;
    let n = spec.num_outputs;

    let image = b.g.input(spec.input_channels);
    // 6x6 stride-2 keeps the division exact for even inputs
    let c = b.g.conv(image, ConvParams::new(spec.input_channels, s0, 6, 2, 2), "stem.conv", false)?;
    let bn = b.g.batchnorm(c, "stem.bn");
    let r = b.g.relu(bn);
    let x = b.block(BlockInput::Single(r), s1, "stem.b0".into(), BlockRole::Stem)?;
    let x = b.g.pool(x, spec.pool);
    let x = b.block(BlockInput::Single(x), s1, "stem.b1".into(), BlockRole::Stem)?;
    let mut x = b.block(BlockInput::Single(x), f, "stem.b2".into(), BlockRole::Stem)?;

    let mut heads = vec![];
    for s in 0..spec.stacks {
        let hg = b.hourglass(x, spec.hg_depth, s)?;
        let post = b.block(hg, f, format!("s{s}.post"), BlockRole::Post)?;
        let lin = b.lin(post, &format!("s{s}.lin"))?;
        let head = b.g.conv(lin, ConvParams::same(f, n, 1), format!("s{s}.head"), false)?;
        heads.push(head);
        if s + 1 < spec.stacks {
            let ll = b.g.conv(lin, ConvParams::same(f, f, 1), format!("s{}.ll_proj", s + 1), spec.binary)?;
            let hp = b.g.conv(head, ConvParams::same(n, f, 1), format!("s{}.heat_proj", s + 1), false)?;
            let sum = b.g.add(x, ll)?;
            x = b.g.add(sum, hp)?;
        }
    }
    b.g.set_outputs(heads);
    b.g.validate()?;
    Ok(Network { spec: spec.clone(), graph: Arc::new(b.g), blocks: b.blocks })
}

pub fn build_hourglass(spec: &NetworkSpec) -> Result<Network> {
    if spec.stacks != 1 || spec.improved {
        return Err(Error::Network("plain hourglass needs stacks = 1 and improved = false".into()));
    }
    build_network(spec)
}

pub fn build_improved_hg(spec: &NetworkSpec) -> Result<Network> {
    if !spec.improved {
        return Err(Error::Network("improved hourglass needs improved = true".into()));
    }
    build_network(spec)
}

pub fn build_stack(spec: &NetworkSpec) -> Result<Network> {
    if spec.stacks < 2 {
        return Err(Error::Network("stacked network needs stacks >= 2".into()));
    }
    build_network(spec)
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub network: Network,
    pub params: ParamStore,
}

impl Model {
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let network = build_network(spec)?;
        let params = ParamStore::init_for(&network.graph, seed);
        Ok(Model { network, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.network.spec
    }

    pub fn graph(&self) -> &Arc<Graph> {
        &self.network.graph
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = input.shape();
        let m = self.spec().input_multiple();
        if !s.h.is_multiple_of(m) || !s.w.is_multiple_of(m) {
            return Err(Error::shape("model", format!("input {}x{} must be a multiple of {m}", s.h, s.w)));
        }
        Ok(())
    }

    /// One heatmap tensor per stack.
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<(Vec<Tensor>, Tape)> {
        self.check_input(input)?;
        autograd::forward(&self.network.graph, &mut self.params, std::slice::from_ref(input), mode)
    }

    pub fn predict(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(input)?;
        autograd::infer(&self.network.graph, &self.params, std::slice::from_ref(input))
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        Shape::new(input.n, self.spec().num_outputs, input.h / 4, input.w / 4)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Real,
    Binary,
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerInfo {
    pub name: String,
    /// "conv" or "batchnorm".
    pub kind: &'static str,
    pub precision: Precision,
    pub params: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Census {
    pub layers: Vec<LayerInfo>,
    pub total_params: usize,
    pub binary_params: usize,
    /// Real-valued parameters, normalization layers included.
    pub real_params: usize,
    pub real_fraction: f64,
}

impl Census {
    pub fn real_convs(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.kind == "conv" && l.precision == Precision::Real)
            .map(|l| l.name.as_str())
            .collect()
    }
}

pub fn layer_census(network: &Network) -> Census {
    let mut layers = vec![];
    for node in network.graph.nodes() {
        match &node.op {
            Op::Conv { conv, weight, binary } => layers.push(LayerInfo {
                name: weight.clone(),
                kind: "conv",
                precision: if *binary { Precision::Binary } else { Precision::Real },
                params: conv.weight_count(),
            }),
            Op::BatchNorm { name } => layers.push(LayerInfo {
                name: name.clone(),
                kind: "batchnorm",
                precision: Precision::Real,
                params: 2 * node.channels,
            }),
            _ => {}
        }
    }
    let total: usize = layers.iter().map(|l| l.params).sum();
    let binary: usize = layers.iter().filter(|l| l.precision == Precision::Binary).map(|l| l.params).sum();
    Census {
        total_params: total,
        binary_params: binary,
        real_params: total - binary,
        real_fraction: (total - binary) as f64 / total as f64,
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(block: BlockKind) -> NetworkSpec {
        NetworkSpec {
            hg_depth: 2,
            base_channels: 16,
            stem_channels: [8, 16],
            num_outputs: 3,
            ..NetworkSpec::full(block)
        }
    }

    #[test]
    fn hourglass_block_count() {
        let net = build_network(&NetworkSpec::full(BlockKind::HpmFull)).unwrap();
        let hg_blocks = net.blocks.iter().filter(|b| b.prefix.starts_with("s0.hg")).count();
        assert_eq!(hg_blocks, 13);
        assert_eq!(net.blocks.len(), 3 + 13 + 1);
    }

    #[test]
    fn improved_has_no_skip_blocks_and_wider_merges() {
        let net = build_improved_hg(&NetworkSpec { improved: true, ..NetworkSpec::full(BlockKind::HpmFull) }).unwrap();
        assert_eq!(net.blocks.iter().filter(|b| b.role == BlockRole::Skip).count(), 0);
        let merges: Vec<_> = net.blocks.iter().filter(|b| b.in_channels == 512).collect();
        assert_eq!(merges.len(), 4);
    }

    #[test]
    fn constructors_check_preconditions() {
        let spec = NetworkSpec::full(BlockKind::HpmFull);
        assert!(build_stack(&spec).is_err());
        assert!(build_improved_hg(&spec).is_err());
        assert!(build_hourglass(&NetworkSpec { stacks: 2, ..spec.clone() }).is_err());
        assert!(build_network(&NetworkSpec { hg_depth: 0, ..spec }).is_err());
    }

    #[test]
    fn binary_and_real_counts_match() {
        for block in BlockKind::TABLE {
            let b = build_network(&tiny(block)).unwrap();
            let r = build_network(&NetworkSpec { binary: false, ..tiny(block) }).unwrap();
            assert_eq!(b.count_params(), r.count_params(), "{block}");
        }
    }

    #[test]
    fn census_real_layers() {
        let net = build_network(&tiny(BlockKind::HpmFull)).unwrap();
        let c = layer_census(&net);
        assert_eq!(c.real_convs(), vec!["stem.conv", "s0.head"]);
        let real = build_network(&NetworkSpec { binary: false, ..tiny(BlockKind::HpmFull) }).unwrap();
        assert_eq!(layer_census(&real).real_fraction, 1.0);
        let stacked = build_network(&NetworkSpec { stacks: 2, ..tiny(BlockKind::HpmFull) }).unwrap();
        assert_eq!(layer_census(&stacked).real_convs(), vec!["stem.conv", "s0.head", "s1.heat_proj", "s1.head"]);
    }

    #[test]
    fn forward_shapes_every_variant() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for (block, improved, stacks) in [
            (BlockKind::HpmFull, false, 1),
            (BlockKind::HpmFull, true, 1),
            (BlockKind::Bottleneck, false, 2),
            (BlockKind::MultiScale, false, 1),
            (BlockKind::MultiScaleNo1x1, true, 1),
        ] {
            let spec = NetworkSpec { improved, stacks, ..tiny(block) };
            let mut m = Model::new(&spec, 3).unwrap();
            let side = spec.input_multiple().max(32);
            let x = Tensor::uniform(Shape::new(1, 3, side, side), 0.0, 1.0, &mut r);
            let (outs, _) = m.forward(&x, Mode::Train).unwrap();
            assert_eq!(outs.len(), stacks);
            for o in &outs {
                assert_eq!(o.shape(), Shape::new(1, 3, side / 4, side / 4));
                assert!(o.is_finite());
            }
            let ev = m.predict(&x).unwrap();
            assert_eq!(ev.len(), stacks);
        }
    }

    #[test]
    fn input_multiple_enforced() {
        let m = Model::new(&tiny(BlockKind::HpmFull), 0).unwrap();
        assert!(m.predict(&Tensor::zeros(Shape::new(1, 3, 20, 20))).is_err());
    }

    #[test]
    fn stacked_stage_one_matches_single() {
        let single = Model::new(&tiny(BlockKind::HpmFull), 9).unwrap();
        let stacked = Model::new(&NetworkSpec { stacks: 2, ..tiny(BlockKind::HpmFull) }, 9).unwrap();
        for (name, p) in single.params.iter() {
            assert_eq!(stacked.params.value(name).unwrap(), &p.value, "{name}");
        }
        let x = Tensor::uniform(Shape::new(1, 3, 32, 32), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(single.predict(&x).unwrap()[0], stacked.predict(&x).unwrap()[0]);
    }
}
