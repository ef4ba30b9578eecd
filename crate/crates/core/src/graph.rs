//! Layer DAG shared by block elaboration, network assembly, execution and
//! serialization. Nodes are appended in topological order, so a node's
//! inputs always have smaller ids.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ConvParams;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    #[default]
    Max,
    Avg,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    /// No bias. When `binary`, the input is passed through sign and the
    /// weights are used as `alpha * sign(W)`; padding cells count as +1.
    Conv { conv: ConvParams, weight: String, binary: bool },
    /// Parameters `{name}.scale` / `{name}.shift`, buffers `{name}.mean` / `{name}.var`.
    BatchNorm { name: String },
    Relu,
    /// Straight-through sign.
    Sign,
    Pool(PoolKind),
    Upsample,
    Concat,
    Add,
}

impl Op {
    /// Name-free description used for structural comparison.
    fn signature(&self) -> String {
        match self {
            Op::Input => "input".into(),
            Op::Conv { conv, binary, .. } => format!(
                "conv{}x{}/{}p{} {}->{} {}",
                conv.kernel,
                conv.kernel,
                conv.stride,
                conv.padding,
                conv.in_channels,
                conv.out_channels,
                if *binary { "bin" } else { "real" }
            ),
            Op::BatchNorm { .. } => "bn".into(),
            Op::Relu => "relu".into(),
            Op::Sign => "sign".into(),
            Op::Pool(k) => format!("pool-{k:?}"),
            Op::Upsample => "up".into(),
            Op::Concat => "concat".into(),
            Op::Add => "add".into(),
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Op::Conv { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    /// Output channel count.
    pub channels: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    outputs: Vec<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn set_outputs(&mut self, outputs: Vec<NodeId>) {
        self.outputs = outputs;
    }

    pub fn input_nodes(&self) -> Vec<NodeId> {
        self.nodes.iter().enumerate().filter(|(_, n)| n.op == Op::Input).map(|(i, _)| i).collect()
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.nodes[id].channels
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, channels: usize) -> NodeId {
        debug_assert!(inputs.iter().all(|&i| i < self.nodes.len()));
        self.nodes.push(Node { op, inputs, channels });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, channels: usize) -> NodeId {
        self.push(Op::Input, vec![], channels)
    }

    pub fn conv(&mut self, x: NodeId, conv: ConvParams, weight: impl Into<String>, binary: bool) -> Result<NodeId> {
        if self.channels(x) != conv.in_channels {
            return Err(Error::Network(format!(
                "conv `{}` expects {} input channels, got {}",
                weight.into(),
                conv.in_channels,
                self.channels(x)
            )));
        }
        Ok(self.push(Op::Conv { conv, weight: weight.into(), binary }, vec![x], conv.out_channels))
    }

    pub fn batchnorm(&mut self, x: NodeId, name: impl Into<String>) -> NodeId {
        let c = self.channels(x);
        self.push(Op::BatchNorm { name: name.into() }, vec![x], c)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let c = self.channels(x);
        self.push(Op::Relu, vec![x], c)
    }

    pub fn sign(&mut self, x: NodeId) -> NodeId {
        let c = self.channels(x);
        self.push(Op::Sign, vec![x], c)
    }

    pub fn pool(&mut self, x: NodeId, kind: PoolKind) -> NodeId {
        let c = self.channels(x);
        self.push(Op::Pool(kind), vec![x], c)
    }

    pub fn upsample(&mut self, x: NodeId) -> NodeId {
        let c = self.channels(x);
        self.push(Op::Upsample, vec![x], c)
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        let c = xs.iter().map(|&x| self.channels(x)).sum();
        self.push(Op::Concat, xs.to_vec(), c)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, cb) = (self.channels(a), self.channels(b));
        if ca != cb {
            return Err(Error::Network(format!("add of {ca} and {cb} channels")));
        }
        Ok(self.push(Op::Add, vec![a, b], ca))
    }

    /// Number of consumers of every node (graph outputs count as consumers).
    pub fn consumer_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.nodes.len()];
        for n in &self.nodes {
            for &i in &n.inputs {
                counts[i] += 1;
            }
        }
        for &o in &self.outputs {
            counts[o] += 1;
        }
        counts
    }

    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![vec![]; self.nodes.len()];
        for (id, n) in self.nodes.iter().enumerate() {
            for &i in &n.inputs {
                out[i].push(id);
            }
        }
        out
    }

    /// Structural invariants: topological order, matching concat widths,
    /// no dangling outputs.
    pub fn validate(&self) -> Result<()> {
        for (id, n) in self.nodes.iter().enumerate() {
            if n.inputs.iter().any(|&i| i >= id) {
                return Err(Error::Network(format!("node {id} is not in topological order")));
            }
            let widths: Vec<usize> = n.inputs.iter().map(|&i| self.nodes[i].channels).collect();
            let ok = match &n.op {
                Op::Input => n.inputs.is_empty(),
                Op::Concat => !widths.is_empty() && widths.iter().sum::<usize>() == n.channels,
                Op::Add => widths.len() == 2 && widths.iter().all(|&w| w == n.channels),
                Op::Conv { conv, .. } => widths == [conv.in_channels] && n.channels == conv.out_channels,
                _ => widths == [n.channels],
            };
            if !ok {
                return Err(Error::Network(format!("node {id} ({}) has inconsistent channels", n.op.signature())));
            }
        }
        if self.outputs.is_empty() || self.outputs.iter().any(|&o| o >= self.nodes.len()) {
            return Err(Error::Network("graph has no valid output".into()));
        }
        Ok(())
    }

    /// Weights of every convolution plus scale/shift of every batch norm.
    pub fn count_params(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::Conv { conv, .. } => conv.weight_count(),
                Op::BatchNorm { .. } => 2 * n.channels,
                _ => 0,
            })
            .sum()
    }

    pub fn conv_nodes(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].op.is_conv()).collect()
    }

    /// For each convolution (in node order): the number of convolutions on the
    /// shortest path from that convolution's input to the first graph output,
    /// counting the convolution itself.
    pub fn shortest_path_lengths(&self) -> Vec<(NodeId, usize)> {
        let out = self.outputs[0];
        // dist[v] = fewest convs strictly after v on a path v -> out
        let consumers = self.consumers();
        let mut dist = vec![usize::MAX; self.nodes.len()];
        dist[out] = 0;
        for v in (0..self.nodes.len()).rev() {
            for &c in &consumers[v] {
                if dist[c] == usize::MAX {
                    continue;
                }
                let step = dist[c] + usize::from(self.nodes[c].op.is_conv());
                dist[v] = dist[v].min(step);
            }
        }
        self.conv_nodes().into_iter().filter(|&c| dist[c] != usize::MAX).map(|c| (c, dist[c] + 1)).collect()
    }

    /// Name-free canonical listing; equal signatures mean the graphs are
    /// isomorphic under the identity node mapping.
    pub fn structural_signature(&self) -> Vec<(String, Vec<NodeId>, usize)> {
        self.nodes.iter().map(|n| (n.op.signature(), n.inputs.clone(), n.channels)).collect()
    }

    pub fn is_isomorphic(&self, other: &Graph) -> bool {
        self.outputs == other.outputs && self.structural_signature() == other.structural_signature()
    }

    /// Whether `to` is reachable from `from`.
    pub fn reaches(&self, from: NodeId, to: NodeId) -> bool {
        let consumers = self.consumers();
        let mut seen = vec![false; self.nodes.len()];
        let mut q = VecDeque::from([from]);
        while let Some(v) = q.pop_front() {
            if v == to {
                return true;
            }
            for &c in &consumers[v] {
                if !seen[c] {
                    seen[c] = true;
                    q.push_back(c);
                }
            }
        }
        false
    }
}
