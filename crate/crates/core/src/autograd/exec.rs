use std::sync::Arc;

use crate::bitops::{binarize_weights, xnor_conv2d};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Op, PoolKind};
use crate::tensor::{
    self, avgpool2, avgpool2_backward, batchnorm_train, batchnorm_train_backward, channel_affine, concat_channels,
    conv2d, conv2d_grad_input, conv2d_grad_weight, conv2d_grad_weight_padded, conv2d_padded, inference_affine,
    maxpool2_backward, maxpool2_with_indices, relu, relu_backward, sign, upsample_bilinear2,
    upsample_bilinear2_backward, BatchNormCache, Tensor,
};

use super::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Cache {
    None,
    BatchNorm(BatchNormCache),
    /// Running-statistics normalization; holds the per-channel slope.
    FrozenBatchNorm(Vec<f32>),
    MaxPool(Vec<u32>),
    BinaryConv { signed: Tensor, dense: Tensor, alpha: Vec<f32> },
}

/// Record of one training-mode forward pass.
#[derive(Debug)]
pub struct Tape {
    graph: Arc<Graph>,
    values: Vec<Option<Tensor>>,
    caches: Vec<Cache>,
    recorded: bool,
}

impl Tape {
    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        if self.recorded {
            self.values.len()
        } else {
            0
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id).and_then(|v| v.as_ref())
    }

    /// An empty tape; backward on it fails with [`Error::NoForward`].
    pub fn unrecorded(graph: Arc<Graph>) -> Self {
        Tape { graph, values: vec![], caches: vec![], recorded: false }
    }
}

/// Gradient of the sign function under the straight-through estimator.
pub fn ste_sign_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    x.zip_map(upstream, |x, g| if x.abs() <= 1.0 { g } else { 0.0 })
}

fn check_inputs(graph: &Graph, inputs: &[Tensor]) -> Result<Vec<NodeId>> {
    let ids = graph.input_nodes();
    if ids.len() != inputs.len() {
        return Err(Error::Network(format!("graph has {} inputs, got {}", ids.len(), inputs.len())));
    }
    for (&id, t) in ids.iter().zip(inputs) {
        if graph.channels(id) != t.shape().c {
            return Err(Error::shape(
                "forward",
                format!("input node expects {} channels, got {}", graph.channels(id), t.shape().c),
            ));
        }
    }
    Ok(ids)
}

fn input_of(values: &[Option<Tensor>], id: NodeId) -> &Tensor {
    values[id].as_ref().expect("value consumed before its last use")
}

/// `alpha * sign(W)` together with the per-filter scales.
fn binarized_dense(w: &Tensor) -> (Tensor, Vec<f32>) {
    let b = binarize_weights(w);
    (b.to_dense(), b.alpha().to_vec())
}

/// Inference pass. Intermediate values are released as soon as their last
/// consumer has run.
pub fn infer(graph: &Graph, store: &ParamStore, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let input_ids = check_inputs(graph, inputs)?;
    let mut remaining = graph.consumer_counts();
    let mut values: Vec<Option<Tensor>> = vec![None; graph.len()];
    let mut next_input = input_ids.iter().zip(inputs);
    for (id, node) in graph.nodes().iter().enumerate() {
        let x = || input_of(&values, node.inputs[0]);
        let out = match &node.op {
            Op::Input => next_input.next().expect("input count checked").1.clone(),
            Op::Conv { conv, weight, binary: false } => conv2d(x(), store.value(weight)?, conv)?,
            Op::Conv { conv, weight, binary: true } => match store.packed(weight) {
                Some(p) => xnor_conv2d(x(), p, conv)?,
                None => xnor_conv2d(x(), &binarize_weights(store.value(weight)?), conv)?,
            },
            Op::BatchNorm { name } => {
                let bn = store.batchnorm(name)?;
                let (a, b) = inference_affine(bn.scale, bn.shift, bn.mean, bn.var, bn.eps);
                channel_affine(x(), &a, &b)
            }
            Op::Relu => relu(x()),
            Op::Sign => sign(x()),
            Op::Pool(PoolKind::Max) => tensor::maxpool2(x())?,
            Op::Pool(PoolKind::Avg) => avgpool2(x())?,
            Op::Upsample => upsample_bilinear2(x()),
            Op::Concat => {
                let parts: Vec<&Tensor> = node.inputs.iter().map(|&i| input_of(&values, i)).collect();
                concat_channels(&parts)?
            }
            Op::Add => tensor::add(x(), input_of(&values, node.inputs[1]))?,
        };
        values[id] = Some(out);
        for &i in &node.inputs {
            remaining[i] -= 1;
            if remaining[i] == 0 {
                values[i] = None;
            }
        }
    }
    Ok(graph.outputs().iter().map(|&o| values[o].clone().expect("outputs are retained")).collect())
}

/// Runs the graph. Training mode normalizes by batch statistics (except in
/// frozen layers), updates running statistics, binarizes through the
/// straight-through estimator and records a tape; evaluation mode runs
/// [`infer`] and returns an unrecorded tape.
pub fn forward(graph: &Arc<Graph>, store: &mut ParamStore, inputs: &[Tensor], mode: Mode) -> Result<(Vec<Tensor>, Tape)> {
    if mode == Mode::Eval {
        return Ok((infer(graph, store, inputs)?, Tape::unrecorded(graph.clone())));
    }
    let input_ids = check_inputs(graph, inputs)?;
    let mut values: Vec<Option<Tensor>> = Vec::with_capacity(graph.len());
    let mut caches = Vec::with_capacity(graph.len());
    let mut next_input = input_ids.iter().zip(inputs);
    for node in graph.nodes() {
        let (out, cache) = match &node.op {
            Op::Input => (next_input.next().expect("input count checked").1.clone(), Cache::None),
            Op::Conv { conv, weight, binary: false } => {
                (conv2d(input_of(&values, node.inputs[0]), store.value(weight)?, conv)?, Cache::None)
            }
            Op::Conv { conv, weight, binary: true } => {
                let signed = sign(input_of(&values, node.inputs[0]));
                let (dense, alpha) = binarized_dense(store.value(weight)?);
                let out = conv2d_padded(&signed, &dense, conv, 1.0)?;
                (out, Cache::BinaryConv { signed, dense, alpha })
            }
            Op::BatchNorm { name } => {
                let bn = store.batchnorm(name)?;
                let xin = input_of(&values, node.inputs[0]);
                if bn.frozen {
                    let (a, b) = inference_affine(bn.scale, bn.shift, bn.mean, bn.var, bn.eps);
                    (channel_affine(xin, &a, &b), Cache::FrozenBatchNorm(a))
                } else {
                    let (out, cache, mean, var) = batchnorm_train(xin, bn.scale, bn.shift, bn.eps)?;
                    update_running(store, name, &mean, &var)?;
                    (out, Cache::BatchNorm(cache))
                }
            }
            Op::Relu => (relu(input_of(&values, node.inputs[0])), Cache::None),
            Op::Sign => (sign(input_of(&values, node.inputs[0])), Cache::None),
            Op::Pool(PoolKind::Max) => {
                let (out, idx) = maxpool2_with_indices(input_of(&values, node.inputs[0]))?;
                (out, Cache::MaxPool(idx))
            }
            Op::Pool(PoolKind::Avg) => (avgpool2(input_of(&values, node.inputs[0]))?, Cache::None),
            Op::Upsample => (upsample_bilinear2(input_of(&values, node.inputs[0])), Cache::None),
            Op::Concat => {
                let parts: Vec<&Tensor> = node.inputs.iter().map(|&i| input_of(&values, i)).collect();
                (concat_channels(&parts)?, Cache::None)
            }
            Op::Add => {
                (tensor::add(input_of(&values, node.inputs[0]), input_of(&values, node.inputs[1]))?, Cache::None)
            }
        };
        values.push(Some(out));
        caches.push(cache);
    }
    let outputs = graph.outputs().iter().map(|&o| values[o].clone().expect("train keeps all values")).collect();
    Ok((outputs, Tape { graph: graph.clone(), values, caches, recorded: true }))
}

fn update_running(store: &mut ParamStore, name: &str, mean: &[f32], var: &[f32]) -> Result<()> {
    let m = crate::tensor::BN_MOMENTUM;
    for (key, batch) in [("mean", mean), ("var", var)] {
        let buf = store.buffer_mut(&format!("{name}.{key}"))?;
        for (r, &b) in buf.iter_mut().zip(batch) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn add_param_grad(store: &mut ParamStore, name: &str, g: &[f32]) -> Result<()> {
    let p = store.get_mut(name)?;
    if p.frozen {
        return Ok(());
    }
    for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
        *a += b;
    }
    Ok(())
}

/// Which nodes need a gradient: those with a trainable parameter upstream
/// (or every input-dependent node when `input_grads` is set).
fn gradient_mask(graph: &Graph, store: &ParamStore, input_grads: bool) -> Result<Vec<bool>> {
    let mut need = vec![false; graph.len()];
    for (id, node) in graph.nodes().iter().enumerate() {
        let own = match &node.op {
            Op::Input => input_grads,
            Op::Conv { weight, .. } => !store.get(weight)?.frozen,
            Op::BatchNorm { name } => !store.get(&format!("{name}.scale"))?.frozen,
            _ => false,
        };
        need[id] = own || node.inputs.iter().any(|&i| need[i]);
    }
    Ok(need)
}

/// Reverse pass: adds parameter gradients into `store` (frozen parameters
/// are skipped) given one upstream gradient per graph output. Returns the
/// gradient for every input node when `input_grads` is set.
pub fn backward_with(
    tape: &Tape,
    output_grads: &[Tensor],
    store: &mut ParamStore,
    input_grads: bool,
) -> Result<Vec<Tensor>> {
    if !tape.recorded {
        return Err(Error::NoForward);
    }
    let graph = &*tape.graph;
    if output_grads.len() != graph.outputs().len() {
        return Err(Error::Invalid(format!(
            "{} output gradients for {} outputs",
            output_grads.len(),
            graph.outputs().len()
        )));
    }
    let need = gradient_mask(graph, store, input_grads)?;
    let mut grads: Vec<Option<Tensor>> = vec![None; graph.len()];
    for (&o, g) in graph.outputs().iter().zip(output_grads) {
        let v = tape.value(o).expect("outputs recorded");
        if v.shape() != g.shape() {
            return Err(Error::shape("backward", format!("gradient {} for output {}", g.shape(), v.shape())));
        }
        accumulate(&mut grads[o], g.clone())?;
    }
    let mut input_out = vec![];
    for id in (0..graph.len()).rev() {
        let node = graph.node(id);
        let Some(g) = grads[id].take() else {
            if node.op == Op::Input && input_grads {
                input_out.push(Tensor::zeros(tape.value(id).expect("inputs recorded").shape()));
            }
            continue;
        };
        if !need[id] {
            continue;
        }
        let xin = |k: usize| tape.value(node.inputs[k]).expect("train keeps all values");
        let wants = |k: usize| need[node.inputs[k]];
        match (&node.op, &tape.caches[id]) {
            (Op::Input, _) => input_out.push(g),
            (Op::Conv { conv, weight, binary: false }, _) => {
                let x = xin(0);
                if !store.get(weight)?.frozen {
                    let gw = conv2d_grad_weight(&g, x, conv)?;
                    add_param_grad(store, weight, gw.data())?;
                }
                if wants(0) {
                    let gx = conv2d_grad_input(&g, store.value(weight)?, conv, x.shape())?;
                    accumulate(&mut grads[node.inputs[0]], gx)?;
                }
            }
            (Op::Conv { conv, weight, binary: true }, Cache::BinaryConv { signed, dense, alpha }) => {
                if !store.get(weight)?.frozen {
                    let gd = conv2d_grad_weight_padded(&g, signed, conv, 1.0)?;
                    let gw = binary_weight_grad(store.value(weight)?, &gd, alpha);
                    add_param_grad(store, weight, &gw)?;
                }
                if wants(0) {
                    let gs = conv2d_grad_input(&g, dense, conv, signed.shape())?;
                    accumulate(&mut grads[node.inputs[0]], ste_sign_backward(xin(0), &gs)?)?;
                }
            }
            (Op::BatchNorm { name }, Cache::BatchNorm(cache)) => {
                let scale = store.value(&format!("{name}.scale"))?.data().to_vec();
                let (dx, dscale, dshift) = batchnorm_train_backward(&g, cache, &scale);
                add_param_grad(store, &format!("{name}.scale"), &dscale)?;
                add_param_grad(store, &format!("{name}.shift"), &dshift)?;
                if wants(0) {
                    accumulate(&mut grads[node.inputs[0]], dx)?;
                }
            }
            (Op::BatchNorm { .. }, Cache::FrozenBatchNorm(a)) => {
                if wants(0) {
                    let zeros = vec![0.0; a.len()];
                    accumulate(&mut grads[node.inputs[0]], channel_affine(&g, a, &zeros))?;
                }
            }
            (Op::Relu, _) => accumulate(&mut grads[node.inputs[0]], relu_backward(xin(0), &g))?,
            (Op::Sign, _) => accumulate(&mut grads[node.inputs[0]], ste_sign_backward(xin(0), &g)?)?,
            (Op::Pool(PoolKind::Max), Cache::MaxPool(idx)) => {
                accumulate(&mut grads[node.inputs[0]], maxpool2_backward(&g, idx, xin(0).shape()))?
            }
            (Op::Pool(PoolKind::Avg), _) => {
                accumulate(&mut grads[node.inputs[0]], avgpool2_backward(&g, xin(0).shape()))?
            }
            (Op::Upsample, _) => {
                accumulate(&mut grads[node.inputs[0]], upsample_bilinear2_backward(&g, xin(0).shape()))?
            }
            (Op::Concat, _) => {
                let sizes: Vec<usize> = node.inputs.iter().map(|&i| graph.channels(i)).collect();
                let parts = tensor::split_channels(&g, &sizes)?;
                for (k, part) in parts.into_iter().enumerate() {
                    if wants(k) {
                        accumulate(&mut grads[node.inputs[k]], part)?;
                    }
                }
            }
            (Op::Add, _) => {
                for k in 0..2 {
                    if wants(k) {
                        accumulate(&mut grads[node.inputs[k]], g.clone())?;
                    }
                }
            }
            (op, _) => return Err(Error::Network(format!("tape cache missing for {op:?}"))),
        }
    }
    input_out.reverse();
    Ok(input_out)
}

/// [`backward_with`] without input gradients.
pub fn backward(tape: &Tape, output_grads: &[Tensor], store: &mut ParamStore) -> Result<()> {
    backward_with(tape, output_grads, store, false).map(|_| ())
}

/// Gradient of the master weights of a binarized convolution whose forward
/// weights are `alpha[f] * sign(W[f])`. `gd` is the gradient with respect to
/// those dense forward weights. Sign passes through the clipped identity and
/// the scale is differentiated as the mean of absolute values.
pub fn binary_weight_grad(w: &Tensor, gd: &Tensor, alpha: &[f32]) -> Vec<f32> {
    let per = w.shape().sample();
    let mut out = vec![0.0f32; w.len()];
    for (f, ((wf, gf), of)) in w.data().chunks(per).zip(gd.data().chunks(per)).zip(out.chunks_mut(per)).enumerate() {
        let corr: f64 = wf.iter().zip(gf).map(|(&wv, &gv)| tensor::sign_scalar(wv) as f64 * gv as f64).sum();
        let through_alpha = (corr / per as f64) as f32;
        for ((o, &wv), &gv) in of.iter_mut().zip(wf).zip(gf) {
            let ste = if wv.abs() <= 1.0 { alpha[f] * gv } else { 0.0 };
            *o = ste + tensor::sign_scalar(wv) * through_alpha;
        }
    }
    out
}

/// Mean absolute gradient of every convolution weight, in graph order.
pub fn grad_flow_probe(graph: &Graph, store: &ParamStore) -> Result<Vec<(String, f64)>> {
    graph
        .nodes()
        .iter()
        .filter_map(|n| match &n.op {
            Op::Conv { weight, .. } => Some(weight),
            _ => None,
        })
        .map(|w| Ok((w.clone(), store.get(w)?.grad.mean_abs())))
        .collect()
}
