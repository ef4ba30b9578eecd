//! Model files.
//!
//! Packed layout: `b"BHG1"`, u32 LE length + canonical JSON [`NetworkSpec`],
//! then one payload per layer in graph order, then a SHA-256 of everything
//! before it.
//! * real conv: weights as f32 LE;
//! * binary conv: the packed wire record (header, scales, bit stream);
//! * batch norm: the folded inference affine, `a[C]` then `b[C]` as f32 LE.
//!
//! The all-real layout (`b"BHGR"`) stores every conv as f32 weights plus a
//! zero bias per output channel and every batch norm as scale, shift, mean
//! and variance. It exists to measure compression.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bitops::{binarize_weights, ScaledBinaryWeights};
use crate::error::{Error, Result};
use crate::graph::Op;
use crate::nets::{Model, NetworkSpec};
use crate::tensor::{inference_affine, Tensor};

pub const MAGIC: &[u8; 4] = b"BHG1";
pub const REAL_MAGIC: &[u8; 4] = b"BHGR";
const DIGEST_LEN: usize = 32;

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn header(magic: &[u8; 4], spec: &NetworkSpec) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(spec)?;
    let mut out = Vec::with_capacity(8 + json.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

fn seal(mut out: Vec<u8>) -> Vec<u8> {
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Packed serialization.
pub fn export(model: &Model) -> Result<Vec<u8>> {
    let mut out = header(MAGIC, model.spec())?;
    for node in model.graph().nodes() {
        match &node.op {
            Op::Conv { weight, binary: false, .. } => put_f32s(&mut out, model.params.value(weight)?.data()),
            Op::Conv { weight, binary: true, .. } => match model.params.packed(weight) {
                Some(p) => p.write_wire(&mut out),
                None => binarize_weights(model.params.value(weight)?).write_wire(&mut out),
            },
            Op::BatchNorm { name } => {
                let bn = model.params.batchnorm(name)?;
                let (a, b) = inference_affine(bn.scale, bn.shift, bn.mean, bn.var, bn.eps);
                put_f32s(&mut out, &a);
                put_f32s(&mut out, &b);
            }
            _ => {}
        }
    }
    Ok(seal(out))
}

/// All-real 32-bit serialization, biases included.
pub fn export_real(model: &Model) -> Result<Vec<u8>> {
    let mut out = header(REAL_MAGIC, model.spec())?;
    for node in model.graph().nodes() {
        match &node.op {
            Op::Conv { conv, weight, .. } => {
                put_f32s(&mut out, model.params.value(weight)?.data());
                put_f32s(&mut out, &vec![0.0; conv.out_channels]);
            }
            Op::BatchNorm { name } => {
                let bn = model.params.batchnorm(name)?;
                for v in [bn.scale, bn.shift, bn.mean, bn.var] {
                    put_f32s(&mut out, v);
                }
            }
            _ => {}
        }
    }
    Ok(seal(out))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Verifies magic and checksum and returns the body (without digest).
fn open(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 8 + DIGEST_LEN {
        return Err(Error::Format("file too short".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected \"BHG1\"", String::from_utf8_lossy(&bytes[..4]))));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }
    Ok(body)
}

/// Reads only the network spec of a packed model file.
pub fn read_spec(bytes: &[u8]) -> Result<NetworkSpec> {
    let body = open(bytes)?;
    let mut r = Reader { bytes: body, pos: 4 };
    let len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
    Ok(serde_json::from_slice(r.take(len)?)?)
}

/// Rebuilds a model from its packed form. Evaluation-mode outputs match the
/// exported model bit for bit.
pub fn import(bytes: &[u8]) -> Result<Model> {
    let body = open(bytes)?;
    let mut r = Reader { bytes: body, pos: 4 };
    let len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
    let spec: NetworkSpec = serde_json::from_slice(r.take(len)?)?;
    let mut model = Model::new(&spec, 0)?;
    let graph = model.graph().clone();
    for node in graph.nodes() {
        match &node.op {
            Op::Conv { conv, weight, binary: false } => {
                let v = r.f32s(conv.weight_count())?;
                model.params.get_mut(weight)?.value = Tensor::new(conv.weight_shape(), v)?;
            }
            Op::Conv { conv, weight, binary: true } => {
                let (w, used) = ScaledBinaryWeights::read_wire(&body[r.pos..])?;
                if w.shape() != conv.weight_shape() {
                    return Err(Error::Format(format!("layer `{weight}` stored as {}, expected {}", w.shape(), conv.weight_shape())));
                }
                r.pos += used;
                model.params.set_packed(weight, w)?;
            }
            Op::BatchNorm { name } => {
                let a = r.f32s(node.channels)?;
                let b = r.f32s(node.channels)?;
                model.params.set_batchnorm_affine(name, &a, &b)?;
            }
            _ => {}
        }
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last layer", body.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<usize> {
    let bytes = export(model)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load(path: &Path) -> Result<Model> {
    import(&std::fs::read(path)?)
}

/// `len(all-real serialization) / len(packed serialization)`.
pub fn compression_ratio(model: &Model) -> Result<f64> {
    Ok(export_real(model)?.len() as f64 / export(model)?.len() as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct StorageItem {
    pub category: &'static str,
    pub packed_bytes: usize,
    pub real_bytes: usize,
}

/// Byte-level breakdown of both serializations.
#[derive(Clone, Debug, Serialize)]
pub struct StorageCensus {
    pub items: Vec<StorageItem>,
    pub packed_total: usize,
    pub real_total: usize,
    pub ratio: f64,
    /// Ratio if the packed file held nothing but binary weight bits.
    pub bits_only_ratio: f64,
}

pub fn storage_census(model: &Model) -> Result<StorageCensus> {
    let header = header(MAGIC, model.spec())?.len();
    let mut real_conv = (0, 0);
    let mut bits = (0, 0);
    let mut scales = (0, 0);
    let mut bn = (0, 0);
    for node in model.graph().nodes() {
        match &node.op {
            Op::Conv { conv, binary, .. } => {
                let real = 4 * (conv.weight_count() + conv.out_channels);
                if *binary {
                    let words = conv.weight_count().div_ceil(32);
                    bits.0 += 4 * words;
                    bits.1 += 4 * conv.weight_count();
                    scales.0 += 16 + 4 * conv.out_channels;
                    scales.1 += 4 * conv.out_channels;
                } else {
                    real_conv.0 += 4 * conv.weight_count();
                    real_conv.1 += real;
                }
            }
            Op::BatchNorm { .. } => {
                bn.0 += 8 * node.channels;
                bn.1 += 16 * node.channels;
            }
            _ => {}
        }
    }
    let items = vec![
        StorageItem { category: "header", packed_bytes: header, real_bytes: header },
        StorageItem { category: "real conv weights (+bias in real form)", packed_bytes: real_conv.0, real_bytes: real_conv.1 },
        StorageItem { category: "binary conv bits (f32 weights in real form)", packed_bytes: bits.0, real_bytes: bits.1 },
        StorageItem { category: "binary conv scales, layer headers (biases in real form)", packed_bytes: scales.0, real_bytes: scales.1 },
        StorageItem { category: "batch norm", packed_bytes: bn.0, real_bytes: bn.1 },
        StorageItem { category: "checksum", packed_bytes: DIGEST_LEN, real_bytes: DIGEST_LEN },
    ];
    let packed_total: usize = items.iter().map(|i| i.packed_bytes).sum();
    let real_total: usize = items.iter().map(|i| i.real_bytes).sum();
    Ok(StorageCensus {
        ratio: real_total as f64 / packed_total as f64,
        bits_only_ratio: real_total as f64 / bits.0.max(1) as f64,
        packed_total,
        real_total,
        items,
    })
}
