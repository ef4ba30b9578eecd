//! Losses, RMSprop, learning-rate schedule, augmentation and the training
//! loops (single network and stage-wise stacked).

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{backward, Mode, ParamKind, ParamStore};
use crate::data::{batch_images, Dataset, Sample, Task};
use crate::error::{Error, Result};
use crate::eval::{decode_batch, encode_batch, nme, pckh, EvalReport, HeatmapGeometry};
use crate::nets::{build_network, Model, Network, NetworkSpec};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Losses

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    PixelL2,
    SigmoidBce,
}

impl LossKind {
    pub fn eval(self, pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
        match self {
            LossKind::PixelL2 => pixel_l2_loss(pred, target),
            LossKind::SigmoidBce => sigmoid_bce_loss(pred, target),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("prediction {} vs target {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Pixelwise sigmoid cross-entropy on logits `(B, N, H, W)`: summed over
/// pixels, averaged over the `B * N` maps. Returns the loss and its gradient.
/// Uses `max(x, 0) - p x + ln(1 + e^-|x|)`, exact for any finite logit.
pub fn sigmoid_bce_loss(logits: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    same_shape("sigmoid_bce_loss", logits, target)?;
    if let Some((i, &p)) = target.data().iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Invalid(format!("target {p} at index {i} outside [0, 1]")));
    }
    let s = logits.shape();
    let maps = (s.n * s.c).max(1) as f64;
    let mut loss = 0.0f64;
    let grad: Vec<f32> = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&x, &p)| {
            let (x, p) = (x as f64, p as f64);
            loss += x.max(0.0) - p * x + (-x.abs()).exp().ln_1p();
            let sig = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { x.exp() / (1.0 + x.exp()) };
            ((sig - p) / maps) as f32
        })
        .collect();
    Ok((loss / maps, Tensor::new(s, grad)?))
}

/// Mean squared error over every element.
pub fn pixel_l2_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    same_shape("pixel_l2_loss", pred, target)?;
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0f64;
    let grad: Vec<f32> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            loss += d * d;
            (2.0 * d / n) as f32
        })
        .collect();
    Ok((loss / n, Tensor::new(pred.shape(), grad)?))
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

pub const RMSPROP_RHO: f32 = 0.99;
pub const RMSPROP_EPS: f32 = 1e-8;

/// One RMSprop step on every trainable parameter, then clips binary master
/// weights to `[-1, 1]`. Frozen parameters are untouched.
pub fn rmsprop_step(store: &mut ParamStore, lr: f32, rho: f32, eps: f32) {
    for (_, p) in store.iter_mut() {
        if p.frozen {
            continue;
        }
        if p.sq_avg.len() != p.value.len() {
            p.sq_avg = vec![0.0; p.value.len()];
        }
        let binary = p.kind == ParamKind::Binary;
        let g = p.grad.data();
        let w = p.value.data_mut();
        for ((w, v), &g) in w.iter_mut().zip(p.sq_avg.iter_mut()).zip(g) {
            *v = rho * *v + (1.0 - rho) * g * g;
            *w -= lr * g / (v.sqrt() + eps);
            if binary {
                *w = w.clamp(-1.0, 1.0);
            }
        }
        debug_assert!(!binary || p.value.data().iter().all(|w| (-1.0..=1.0).contains(w)));
    }
}

/// Step decay: `initial` multiplied by a constant factor at each milestone,
/// landing exactly on `final_lr` after the last one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub final_lr: f64,
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    /// Milestones at `fractions` of `epochs`, rounded.
    pub fn new(epochs: usize, initial: f64, final_lr: f64, fractions: &[f64]) -> Self {
        let milestones = fractions.iter().map(|f| (f * epochs as f64).round() as usize).collect();
        LrSchedule { initial, final_lr, milestones }
    }

    pub fn factor(&self) -> f64 {
        (self.final_lr / self.initial).powf(1.0 / self.milestones.len().max(1) as f64)
    }

    /// Learning rate for zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        if passed == self.milestones.len() && passed > 0 {
            self.final_lr
        } else {
            self.initial * self.factor().powi(passed as i32)
        }
    }
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Rotation drawn from `[-max_rotation, max_rotation]` degrees.
    pub max_rotation: f32,
    pub scale_range: (f32, f32),
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { enabled: true, max_rotation: 40.0, scale_range: (0.7, 1.3), flip_prob: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f32,
    pub scale: f32,
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { rotation_deg: 0.0, scale: 1.0, flip: false };
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig { enabled: false, ..Self::default() }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentParams {
        if !self.enabled {
            return AugmentParams::IDENTITY;
        }
        let rotation_deg = rng.gen_range(-self.max_rotation..=self.max_rotation);
        let scale = rng.gen_range(self.scale_range.0..=self.scale_range.1);
        let flip = rng.gen_bool(self.flip_prob);
        AugmentParams { rotation_deg, scale, flip }
    }
}

/// Forward map as a 2x3 matrix: scale and rotate about the image centre,
/// then mirror `x -> w - 1 - x` if flipping.
pub fn augment_matrix(p: AugmentParams, w: usize, h: usize) -> [[f64; 3]; 2] {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = (p.rotation_deg as f64).to_radians().sin_cos();
    let s = p.scale as f64;
    let mut m = [[s * cos, -s * sin, 0.0], [s * sin, s * cos, 0.0]];
    m[0][2] = cx - m[0][0] * cx - m[0][1] * cy;
    m[1][2] = cy - m[1][0] * cx - m[1][1] * cy;
    if p.flip {
        for k in 0..3 {
            m[0][k] = -m[0][k];
        }
        m[0][2] += w as f64 - 1.0;
    }
    m
}

fn apply(m: &[[f64; 3]; 2], x: f64, y: f64) -> [f64; 2] {
    [m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2]]
}

fn invert(m: &[[f64; 3]; 2]) -> [[f64; 3]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
    [[a, b, -(a * m[0][2] + b * m[1][2])], [c, d, -(c * m[0][2] + d * m[1][2])]]
}

/// Applies a drawn transform: bilinear image resampling with zero fill,
/// nearest-neighbour for masks, keypoints mapped by the same matrix (and
/// renamed through `flip_map` when flipping). Keypoints leaving the image
/// become invisible.
pub fn apply_augment(sample: &Sample, p: AugmentParams, flip_map: Option<&[usize]>) -> Result<Sample> {
    let s = sample.image.shape();
    let m = augment_matrix(p, s.w, s.h);
    let inv = invert(&m);
    let mut image = Tensor::zeros(s);
    let mut mask = sample.mask.as_ref().map(|_| vec![0u8; s.h * s.w]);
    let (wmax, hmax) = ((s.w - 1) as f64, (s.h - 1) as f64);
    for y in 0..s.h {
        for x in 0..s.w {
            let [sx, sy] = apply(&inv, x as f64, y as f64);
            if let (Some(out), Some(src)) = (mask.as_mut(), sample.mask.as_ref()) {
                let (nx, ny) = (sx.round(), sy.round());
                if nx >= 0.0 && ny >= 0.0 && nx <= wmax && ny <= hmax {
                    out[y * s.w + x] = src[ny as usize * s.w + nx as usize];
                }
            }
            if sx < 0.0 || sy < 0.0 || sx > wmax || sy > hmax {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(s.w - 1), (y0 + 1).min(s.h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..s.c {
                let v = |yy, xx| sample.image.at(0, c, yy, xx) as f64;
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                image.set(0, c, y, x, (top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    let n = sample.keypoints.len();
    let source = |i: usize| -> Result<usize> {
        if !p.flip {
            return Ok(i);
        }
        let map = flip_map.ok_or_else(|| Error::Invalid("flipping requires a flip map".into()))?;
        map.get(i).copied().ok_or_else(|| Error::Length(format!("flip map has {} entries for {n} keypoints", map.len())))
    };
    let mut keypoints = Vec::with_capacity(n);
    let mut visibility = Vec::with_capacity(n);
    for i in 0..n {
        let j = source(i)?;
        let q = apply(&m, sample.keypoints[j][0] as f64, sample.keypoints[j][1] as f64);
        let inside = q[0] >= 0.0 && q[1] >= 0.0 && q[0] <= wmax && q[1] <= hmax;
        keypoints.push([q[0] as f32, q[1] as f32]);
        visibility.push(sample.visibility[j] && inside);
    }
    Ok(Sample { image, keypoints, visibility, scale: sample.scale * p.scale, mask })
}

/// Draws parameters from `config` and applies them; the identity when
/// augmentation is disabled.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, config: &AugmentConfig, flip_map: Option<&[usize]>, rng: &mut R) -> Result<Sample> {
    if !config.enabled {
        return Ok(sample.clone());
    }
    let p = config.sample(rng);
    apply_augment(sample, p, flip_map)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub final_lr: f64,
    /// Learning-rate drops, as fractions of the run.
    pub milestones: Vec<f64>,
    pub rho: f32,
    pub eps: f32,
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub geometry: HeatmapGeometry,
    /// Length of the final joint phase of stage-wise stacked training.
    pub joint_epochs: usize,
    /// Multiplies every epoch count (desk-scale runs use values below 1).
    pub epoch_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 2.5e-4,
            final_lr: 5e-5,
            milestones: vec![0.3, 0.6, 0.8, 0.9],
            rho: RMSPROP_RHO,
            eps: RMSPROP_EPS,
            batch_size: 8,
            loss: LossKind::SigmoidBce,
            seed: 0,
            augment: AugmentConfig::default(),
            geometry: HeatmapGeometry::default(),
            joint_epochs: 50,
            epoch_scale: 1.0,
        }
    }
}

impl TrainConfig {
    fn scaled(&self, epochs: usize) -> usize {
        if epochs == 0 {
            return 0;
        }
        ((epochs as f64 * self.epoch_scale).round() as usize).max(1)
    }

    pub fn effective_epochs(&self) -> usize {
        self.scaled(self.epochs)
    }

    pub fn effective_joint_epochs(&self) -> usize {
        self.scaled(self.joint_epochs)
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.effective_epochs(), self.lr, self.final_lr, &self.milestones)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub metric: Option<f64>,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().filter(|r| r.split == "train").map(|r| r.loss).collect()
    }

    pub fn last_metric(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.metric)
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x243f_6a88_85a3_08d3;
    for v in [a, b] {
        h = (h ^ v).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(29);
    }
    h
}

/// Augmented copy of sample `i` for `epoch`; the RNG depends only on
/// `(seed, epoch, i)`, so the result is independent of batching order.
pub fn training_sample(data: &Dataset, i: usize, epoch: usize, config: &TrainConfig) -> Result<Sample> {
    let s = data.get(i)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, epoch as u64, i as u64));
    augment(&s, &config.augment, Some(data.flip_map()), &mut rng)
}

fn check_model(model: &Model, data: &Dataset) -> Result<()> {
    if model.spec().num_outputs != data.num_parts() {
        return Err(Error::data(None, format!("model predicts {} parts, dataset has {}", model.spec().num_outputs, data.num_parts())));
    }
    Ok(())
}

/// Last-stage heatmap predictions for the whole dataset, evaluation mode.
pub fn predict_dataset(model: &Model, data: &Dataset, batch_size: usize) -> Result<Vec<Tensor>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    idx.par_chunks(batch_size.max(1))
        .map(|chunk| {
            let samples = chunk.iter().map(|&i| data.get(i)).collect::<Result<Vec<_>>>()?;
            let preds = model.predict(&batch_images(&samples)?)?;
            Ok(preds.into_iter().last().expect("at least one output"))
        })
        .collect()
}

/// Validation loss (last stage) and PCKh@0.5, or NME for alignment data.
pub fn evaluate(model: &Model, data: &Dataset, config: &TrainConfig) -> Result<(f64, EvalReport)> {
    check_model(model, data)?;
    let samples = (0..data.len()).map(|i| data.get(i)).collect::<Result<Vec<_>>>()?;
    let preds = predict_dataset(model, data, config.batch_size)?;
    let mut loss = 0.0;
    let mut kp = vec![];
    let mut k = 0;
    for p in &preds {
        let s = p.shape();
        let batch: Vec<&Sample> = samples[k..k + s.n].iter().collect();
        k += s.n;
        let target = encode_batch(&batch, config.geometry, s.h, s.w)?;
        loss += config.loss.eval(p, &target)?.0 * s.n as f64;
        kp.extend(decode_batch(p, config.geometry).into_iter().map(|d| d.iter().map(|d| d.position).collect::<Vec<_>>()));
    }
    let gts: Vec<Vec<[f32; 2]>> = samples.iter().map(|s| s.keypoints.clone()).collect();
    let vis: Vec<Vec<bool>> = samples.iter().map(|s| s.visibility.clone()).collect();
    let hs: Vec<f32> = samples.iter().map(|s| s.scale).collect();
    let mut report = match data.manifest.task {
        Task::Alignment => nme(&kp, &gts, &vis, &hs)?,
        _ => pckh(&kp, &gts, &vis, &hs, 0.5)?,
    };
    report.part_names = data.manifest.part_names.clone();
    Ok((loss / samples.len().max(1) as f64, report))
}

struct JsonLines(Option<std::io::BufWriter<std::fs::File>>);

impl JsonLines {
    fn open(path: Option<&Path>) -> Result<Self> {
        Ok(JsonLines(match path {
            Some(p) => Some(std::io::BufWriter::new(std::fs::OpenOptions::new().create(true).append(true).open(p)?)),
            None => None,
        }))
    }

    fn write(&mut self, r: &LogRecord) -> Result<()> {
        if let Some(w) = &mut self.0 {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    }
}

/// Trains every unfrozen parameter of `model` with supervision on all stack
/// outputs (equal weights). Deterministic for a given configuration.
pub fn train(model: &mut Model, data: &Dataset, val: Option<&Dataset>, config: &TrainConfig, log: Option<&Path>) -> Result<TrainLog> {
    check_model(model, data)?;
    if let Some(v) = val {
        check_model(model, v)?;
    }
    let mut sink = JsonLines::open(log)?;
    let schedule = config.schedule();
    let epochs = config.effective_epochs();
    let start = Instant::now();
    let mut out = TrainLog::default();
    model.params.zero_grad();
    for epoch in 0..epochs {
        let lr = schedule.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(config.seed, u64::MAX, epoch as u64)));
        let (mut total, mut seen) = (0.0f64, 0usize);
        for chunk in order.chunks(config.batch_size.max(1)) {
            if chunk.len() < 2 && data.len() >= 2 {
                // batch statistics need at least two samples
                continue;
            }
            let samples = chunk.iter().map(|&i| training_sample(data, i, epoch, config)).collect::<Result<Vec<_>>>()?;
            let x = batch_images(&samples)?;
            let (outs, tape) = model.forward(&x, Mode::Train)?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let s = outs[0].shape();
            let target = encode_batch(&refs, config.geometry, s.h, s.w)?;
            let mut grads = Vec::with_capacity(outs.len());
            let mut loss = 0.0;
            for o in &outs {
                let (l, g) = config.loss.eval(o, &target)?;
                loss += l;
                grads.push(g);
            }
            if !loss.is_finite() {
                return Err(Error::Numerical { epoch, msg: format!("loss became {loss} after {seen} samples") });
            }
            backward(&tape, &grads, &mut model.params)?;
            rmsprop_step(&mut model.params, lr as f32, config.rho, config.eps);
            model.params.zero_grad();
            total += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let rec = LogRecord {
            epoch,
            split: "train".into(),
            loss: total / seen.max(1) as f64,
            metric: None,
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        sink.write(&rec)?;
        out.records.push(rec);
        if let Some(v) = val {
            let (loss, report) = evaluate(model, v, config)?;
            if !loss.is_finite() {
                return Err(Error::Numerical { epoch, msg: format!("validation loss became {loss}") });
            }
            let rec = LogRecord {
                epoch,
                split: "val".into(),
                loss,
                metric: Some(report.aggregate),
                lr,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            sink.write(&rec)?;
            out.records.push(rec);
        }
        log::info!("epoch {epoch}: train loss {:.5}, lr {lr:.3e}", total / seen.max(1) as f64);
    }
    Ok(out)
}

/// Stage-wise training of a stacked model: train stage 1, freeze it, add and
/// train stage 2, and so on; then unfreeze everything for a joint phase of
/// `joint_epochs` (scaled). Frozen stages keep their weights and batch-norm
/// statistics bit for bit.
pub fn train_stacked(model: &Model, data: &Dataset, val: Option<&Dataset>, config: &TrainConfig, log: Option<&Path>) -> Result<(Model, TrainLog)> {
    let stacks = model.spec().stacks;
    if stacks < 2 {
        return Err(Error::Invalid("stage-wise training needs at least two stacks".into()));
    }
    // Every phase carries the full store; parameters of stages not yet in
    // the graph receive no gradient and stay at their initial values.
    let mut params = model.params.clone();
    let mut all = TrainLog::default();
    for k in 1..=stacks {
        let spec = NetworkSpec { stacks: k, ..model.spec().clone() };
        params.set_all_frozen(false);
        for s in 0..k - 1 {
            for prefix in Network::stage_prefixes(s) {
                params.set_frozen(&prefix, true);
            }
        }
        let mut m = Model { network: build_network(&spec)?, params };
        let phase = train(&mut m, data, val, config, log)?;
        all.records.extend(phase.records.into_iter().map(|mut r| {
            r.split = format!("stage{k}.{}", r.split);
            r
        }));
        params = m.params;
    }
    params.set_all_frozen(false);
    let mut m = Model { network: model.network.clone(), params };
    if config.effective_joint_epochs() > 0 {
        let joint = TrainConfig { epochs: config.joint_epochs, ..config.clone() };
        let phase = train(&mut m, data, val, &joint, log)?;
        all.records.extend(phase.records.into_iter().map(|mut r| {
            r.split = format!("joint.{}", r.split);
            r
        }));
    }
    Ok((m, all))
}
