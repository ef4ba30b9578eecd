//! Residual block variants and their elaboration into layer graphs.
//!
//! Every convolution is pre-activated: `BN -> sign (binary) | relu (real) -> conv`,
//! optionally followed by a ReLU. Blocks never change spatial extents.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, PoolKind};
use crate::tensor::ConvParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BlockKind {
    Bottleneck,
    Wider,
    MultiScale,
    MultiScaleNo1x1,
    HpmFull,
    HpmReduced,
    HpmDepth(usize),
    HpmCardinality(usize),
}

impl BlockKind {
    /// The blocks compared side by side in the parameter table.
    pub const TABLE: [BlockKind; 6] = [
        BlockKind::Bottleneck,
        BlockKind::Wider,
        BlockKind::MultiScale,
        BlockKind::MultiScaleNo1x1,
        BlockKind::HpmReduced,
        BlockKind::HpmFull,
    ];

    pub fn validate(&self) -> Result<()> {
        match *self {
            BlockKind::HpmDepth(d) if !(3..=8).contains(&d) => {
                Err(Error::Block(format!("depth must be in 3..=8, got {d}")))
            }
            BlockKind::HpmCardinality(c) if !(1..=16).contains(&c) => {
                Err(Error::Block(format!("cardinality must be in 1..=16, got {c}")))
            }
            _ => Ok(()),
        }
    }

    /// Network width used for this block in the full-size configuration.
    pub fn full_width(&self) -> usize {
        match self {
            BlockKind::HpmReduced => 192,
            _ => 256,
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKind::Bottleneck => f.write_str("bottleneck"),
            BlockKind::Wider => f.write_str("wider"),
            BlockKind::MultiScale => f.write_str("ms"),
            BlockKind::MultiScaleNo1x1 => f.write_str("ms_no1x1"),
            BlockKind::HpmFull => f.write_str("hpm"),
            BlockKind::HpmReduced => f.write_str("hpm_reduced"),
            BlockKind::HpmDepth(d) => write!(f, "hpm_depth:{d}"),
            BlockKind::HpmCardinality(c) => write!(f, "hpm_card:{c}"),
        }
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "bottleneck" => BlockKind::Bottleneck,
            "wider" => BlockKind::Wider,
            "ms" => BlockKind::MultiScale,
            "ms_no1x1" => BlockKind::MultiScaleNo1x1,
            "hpm" => BlockKind::HpmFull,
            "hpm_reduced" => BlockKind::HpmReduced,
            _ => {
                let parse = |v: &str| v.parse::<usize>().map_err(|_| Error::Block(format!("bad number in `{s}`")));
                if let Some(d) = s.strip_prefix("hpm_depth:") {
                    BlockKind::HpmDepth(parse(d)?)
                } else if let Some(c) = s.strip_prefix("hpm_card:") {
                    BlockKind::HpmCardinality(parse(c)?)
                } else {
                    return Err(Error::Block(format!("unknown block `{s}`")));
                }
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl TryFrom<String> for BlockKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BlockKind> for String {
    fn from(k: BlockKind) -> String {
        k.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub binary: bool,
    pub relu_after_conv: bool,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize) -> Self {
        BlockSpec { kind, in_channels, out_channels, binary: true, relu_after_conv: false }
    }

    pub fn real(self) -> Self {
        BlockSpec { binary: false, ..self }
    }
}

/// A block's layer DAG with one input node and one output.
pub type BlockGraph = Graph;

/// What a block consumes: a single tensor, or the two halves of an
/// encoder/decoder merge that are concatenated for the convolutions and
/// summed for the residual path.
#[derive(Clone, Copy, Debug)]
pub enum BlockInput {
    Single(NodeId),
    Merge { skip: NodeId, up: NodeId },
}

struct Builder<'a> {
    g: &'a mut Graph,
    prefix: &'a str,
    binary: bool,
    relu_after: bool,
    bn: usize,
    conv: usize,
}

impl Builder<'_> {
    fn act(&mut self, x: NodeId) -> NodeId {
        let bn = self.g.batchnorm(x, format!("{}.bn{}", self.prefix, self.bn));
        self.bn += 1;
        if self.binary {
            bn
        } else {
            self.g.relu(bn)
        }
    }

    fn conv(&mut self, a: NodeId, out: usize, k: usize) -> Result<NodeId> {
        let params = ConvParams::same(self.g.channels(a), out, k);
        let c = self.g.conv(a, params, format!("{}.conv{}", self.prefix, self.conv), self.binary)?;
        self.conv += 1;
        Ok(if self.relu_after { self.g.relu(c) } else { c })
    }

    fn unit(&mut self, x: NodeId, out: usize, k: usize) -> Result<NodeId> {
        let a = self.act(x);
        self.conv(a, out, k)
    }

    fn projection(&mut self, a: NodeId, out: usize) -> Result<NodeId> {
        let params = ConvParams::same(self.g.channels(a), out, 1);
        self.g.conv(a, params, format!("{}.proj", self.prefix), self.binary)
    }
}

fn need_divisible(out: usize, by: usize, what: &str) -> Result<()> {
    if out == 0 || !out.is_multiple_of(by) {
        return Err(Error::Block(format!("{what} needs output channels divisible by {by}, got {out}")));
    }
    Ok(())
}

/// Layer widths of the depth-`d` cascade: halving from `out/2`, floored at 4,
/// last layer repeating the previous width; any excess over `out` is taken
/// from the first layer.
pub fn hpm_depth_widths(out: usize, d: usize) -> Result<Vec<usize>> {
    BlockKind::HpmDepth(d).validate()?;
    need_divisible(out, 2, "hpm_depth")?;
    let mut w: Vec<usize> = (0..d - 1).map(|i| (out >> (i + 1)).max(4)).collect();
    w.push(w[d - 2]);
    let total: usize = w.iter().sum();
    if total > out {
        let excess = total - out;
        if w[0] <= excess {
            return Err(Error::Block(format!("{out} channels too few for a depth-{d} cascade")));
        }
        w[0] -= excess;
    } else if total < out {
        w[0] += out - total;
    }
    Ok(w)
}

/// Per-replica widths `[first, second, third]` of the cardinality-`c` block.
pub fn hpm_card_widths(out: usize, c: usize) -> Result<[usize; 3]> {
    BlockKind::HpmCardinality(c).validate()?;
    need_divisible(out, 4, "hpm_card")?;
    if !(out / 4).is_multiple_of(c) {
        return Err(Error::Block(format!("cardinality {c} does not divide branch width {}", out / 4)));
    }
    Ok([out / 2 / c, out / 4 / c, out / 4 / c])
}

/// Appends one block to `g` and returns its output node.
pub fn elaborate_into(g: &mut Graph, input: BlockInput, spec: &BlockSpec, prefix: &str) -> Result<NodeId> {
    spec.kind.validate()?;
    let out = spec.out_channels;
    let (x, residual) = match input {
        BlockInput::Single(x) => (x, None),
        BlockInput::Merge { skip, up } => {
            let cat = g.concat(&[skip, up]);
            (cat, Some(g.add(skip, up)?))
        }
    };
    if g.channels(x) != spec.in_channels {
        return Err(Error::Block(format!(
            "{} block `{prefix}` declared {} input channels but receives {}",
            spec.kind,
            spec.in_channels,
            g.channels(x)
        )));
    }
    let mut b = Builder { g, prefix, binary: spec.binary, relu_after: spec.relu_after_conv, bn: 0, conv: 0 };
    let xa = b.act(x);
    let body = match spec.kind {
        BlockKind::Bottleneck | BlockKind::Wider => {
            need_divisible(out, 2, "bottleneck")?;
            let mid = if spec.kind == BlockKind::Wider { out } else { out / 2 };
            let c1 = b.conv(xa, mid, 1)?;
            let c2 = b.unit(c1, mid, 3)?;
            b.unit(c2, out, 1)?
        }
        BlockKind::MultiScale => {
            need_divisible(out, 16, "ms")?;
            let l1 = b.conv(xa, out / 4, 1)?;
            let l2 = b.unit(l1, out / 4, 3)?;
            let p = b.g.pool(x, PoolKind::Max);
            let r1 = b.unit(p, out / 16, 3)?;
            let r2a = b.unit(p, 3 * out / 16, 3)?;
            let r2b = b.unit(r2a, 3 * out / 16, 3)?;
            let rc = b.g.concat(&[r1, r2b]);
            let up = b.g.upsample(rc);
            let cat = b.g.concat(&[l2, up]);
            b.unit(cat, out, 1)?
        }
        BlockKind::MultiScaleNo1x1 => {
            need_divisible(out, 4, "ms_no1x1")?;
            let l = b.conv(xa, out / 2, 3)?;
            let p = b.g.pool(x, PoolKind::Max);
            let r1 = b.unit(p, out / 4, 3)?;
            let r2a = b.unit(p, out / 4, 3)?;
            let r2b = b.unit(r2a, out / 4, 3)?;
            let rc = b.g.concat(&[r1, r2b]);
            let up = b.g.upsample(rc);
            b.g.concat(&[l, up])
        }
        BlockKind::HpmFull | BlockKind::HpmReduced => {
            need_divisible(out, 4, "hpm")?;
            let c1 = b.conv(xa, out / 2, 3)?;
            let c2 = b.unit(c1, out / 4, 3)?;
            let c3 = b.unit(c2, out / 4, 3)?;
            b.g.concat(&[c1, c2, c3])
        }
        BlockKind::HpmDepth(d) => {
            let widths = hpm_depth_widths(out, d)?;
            let mut outs = vec![b.conv(xa, widths[0], 3)?];
            for &w in &widths[1..] {
                let prev = *outs.last().unwrap();
                outs.push(b.unit(prev, w, 3)?);
            }
            b.g.concat(&outs)
        }
        BlockKind::HpmCardinality(c) => {
            let [w1, w2, w3] = hpm_card_widths(out, c)?;
            let mut outs = Vec::with_capacity(3 * c);
            for _ in 0..c {
                let c1 = b.conv(xa, w1, 3)?;
                let c2 = b.unit(c1, w2, 3)?;
                let c3 = b.unit(c2, w3, 3)?;
                outs.extend([c1, c2, c3]);
            }
            b.g.concat(&outs)
        }
    };
    debug_assert_eq!(b.g.channels(body), out);
    let residual = match residual {
        Some(r) => r,
        None if spec.in_channels == out => x,
        None => b.projection(xa, out)?,
    };
    if b.g.channels(residual) != out {
        return Err(Error::Block(format!(
            "merge residual has {} channels, block output {out}",
            b.g.channels(residual)
        )));
    }
    b.g.add(body, residual)
}

/// Stand-alone graph for one block.
pub fn elaborate(spec: &BlockSpec) -> Result<BlockGraph> {
    let mut g = Graph::new();
    let x = g.input(spec.in_channels);
    let y = elaborate_into(&mut g, BlockInput::Single(x), spec, "block")?;
    g.set_outputs(vec![y]);
    g.validate()?;
    Ok(g)
}

pub fn count_params(graph: &Graph) -> usize {
    graph.count_params()
}

/// Per convolution: convolutions on the shortest route to the block output,
/// counting the convolution itself (1 = feeds the output directly).
pub fn shortest_path_lengths(graph: &BlockGraph) -> Vec<usize> {
    graph.shortest_path_lengths().into_iter().map(|(_, l)| l).collect()
}

pub fn depth_variant(d: usize, channels: usize, binary: bool) -> Result<BlockGraph> {
    let spec = BlockSpec { binary, ..BlockSpec::new(BlockKind::HpmDepth(d), channels, channels) };
    elaborate(&spec)
}

pub fn cardinality_variant(c: usize, channels: usize, binary: bool) -> Result<BlockGraph> {
    let spec = BlockSpec { binary, ..BlockSpec::new(BlockKind::HpmCardinality(c), channels, channels) };
    elaborate(&spec)
}
