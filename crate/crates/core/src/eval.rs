//! Heatmap codec and evaluation metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Maps heatmap pixel `(u, v)` to input coordinates `(stride*u + offset, stride*v + offset)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGeometry {
    pub stride: f32,
    pub offset: f32,
    /// Gaussian width in heatmap pixels.
    pub sigma: f32,
}

impl Default for HeatmapGeometry {
    /// The stride-4 output of the hourglass networks; pixel `u` of the
    /// heatmap covers input pixels `4u ..= 4u + 3`.
    fn default() -> Self {
        HeatmapGeometry { stride: 4.0, offset: 1.5, sigma: 1.0 }
    }
}

impl HeatmapGeometry {
    pub fn to_heatmap(&self, p: [f32; 2]) -> [f32; 2] {
        [(p[0] - self.offset) / self.stride, (p[1] - self.offset) / self.stride]
    }

    pub fn to_input(&self, p: [f32; 2]) -> [f32; 2] {
        [self.stride * p[0] + self.offset, self.stride * p[1] + self.offset]
    }
}

/// Per-part maps of one sample, `(1, N, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapSet {
    pub maps: Tensor,
    pub geometry: HeatmapGeometry,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub position: [f32; 2],
    pub confidence: f32,
}

fn gaussian_into(out: &mut [f32], w: usize, centre: [f32; 2], sigma: f32) {
    let inv = 1.0 / (2.0 * sigma as f64 * sigma as f64);
    for (i, row) in out.chunks_exact_mut(w).enumerate() {
        let dy = i as f64 - centre[1] as f64;
        for (j, v) in row.iter_mut().enumerate() {
            let dx = j as f64 - centre[0] as f64;
            *v = (-(dx * dx + dy * dy) * inv).exp() as f32;
        }
    }
}

/// Unnormalized Gaussian per visible part; invisible parts get a zero map.
pub fn encode_heatmaps(keypoints: &[[f32; 2]], visibility: &[bool], geometry: HeatmapGeometry, h: usize, w: usize) -> Result<HeatmapSet> {
    if keypoints.len() != visibility.len() {
        return Err(Error::Length(format!("{} keypoints, {} visibility flags", keypoints.len(), visibility.len())));
    }
    let mut maps = Tensor::zeros(Shape::new(1, keypoints.len(), h, w));
    for (n, (&p, &v)) in keypoints.iter().zip(visibility).enumerate() {
        if v {
            gaussian_into(&mut maps.data_mut()[n * h * w..(n + 1) * h * w], w, geometry.to_heatmap(p), geometry.sigma);
        }
    }
    Ok(HeatmapSet { maps, geometry })
}

/// Targets for a batch, `(B, N, H, W)`.
pub fn encode_batch(samples: &[&Sample], geometry: HeatmapGeometry, h: usize, w: usize) -> Result<Tensor> {
    let sets = samples
        .iter()
        .map(|s| encode_heatmaps(&s.keypoints, &s.visibility, geometry, h, w).map(|s| s.maps))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&sets.iter().collect::<Vec<_>>())
}

/// Argmax readout of every map of every sample in `(B, N, H, W)`. Ties go to
/// the smallest row-major index.
pub fn decode_batch(maps: &Tensor, geometry: HeatmapGeometry) -> Vec<Vec<Detection>> {
    let s = maps.shape();
    let plane = s.h * s.w;
    maps.data()
        .chunks_exact(plane.max(1))
        .map(|m| {
            let (mut best, mut arg) = (f32::NEG_INFINITY, 0);
            for (k, &v) in m.iter().enumerate() {
                if v > best {
                    best = v;
                    arg = k;
                }
            }
            Detection { position: geometry.to_input([(arg % s.w) as f32, (arg / s.w) as f32]), confidence: best }
        })
        .collect::<Vec<_>>()
        .chunks(s.c.max(1))
        .map(<[Detection]>::to_vec)
        .collect()
}

pub fn decode_heatmaps(h: &HeatmapSet) -> Vec<Detection> {
    decode_batch(&h.maps, h.geometry).into_iter().next().unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub part_names: Vec<String>,
    /// `None` for parts without any annotation.
    pub per_part: Vec<Option<f64>>,
    pub aggregate: f64,
    /// `(threshold, fraction)` samples of the cumulative error curve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve: Option<Vec<(f64, f64)>>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `part,score` rows followed by the aggregate.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("part,score\n");
        for (i, v) in self.per_part.iter().enumerate() {
            let name = self.part_names.get(i).cloned().unwrap_or_else(|| i.to_string());
            let _ = writeln!(out, "{name},{}", v.map(|v| v.to_string()).unwrap_or_default());
        }
        let _ = writeln!(out, "mean,{}", self.aggregate);
        out
    }

    /// Line plot of the cumulative curve, if there is one.
    pub fn curve_svg(&self) -> Option<String> {
        self.curve.as_ref().map(|c| curve_svg(c, &self.metric))
    }
}

pub fn curve_svg(curve: &[(f64, f64)], title: &str) -> String {
    let (w, h, m) = (420.0, 320.0, 40.0);
    let xmax = curve.iter().map(|p| p.0).fold(0.0f64, f64::max).max(1e-12);
    let px = |x: f64| m + (w - 2.0 * m) * x / xmax;
    let py = |y: f64| h - m - (h - 2.0 * m) * y;
    let points: Vec<String> = curve.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">error threshold (max {xmax:.4})</text>"#, w / 2.0, h - 8.0);
    let _ = writeln!(s, r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">fraction</text>"#, h / 2.0, h / 2.0);
    let _ = writeln!(s, r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{title}</text>"#, w / 2.0);
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, points.join(" "));
    s.push_str("</svg>\n");
    s
}

fn check_sets(preds: &[Vec<[f32; 2]>], gts: &[Vec<[f32; 2]>], visible: &[Vec<bool>], scales: &[f32], what: &str) -> Result<usize> {
    if preds.len() != gts.len() || gts.len() != visible.len() || gts.len() != scales.len() {
        return Err(Error::Length(format!(
            "{} predictions, {} ground truths, {} visibility sets, {} {what}s",
            preds.len(),
            gts.len(),
            visible.len(),
            scales.len()
        )));
    }
    let parts = gts.first().map_or(0, Vec::len);
    for i in 0..gts.len() {
        if preds[i].len() != parts || gts[i].len() != parts || visible[i].len() != parts {
            return Err(Error::Length(format!("sample {i} has a different part count")));
        }
        if !(scales[i] > 0.0) {
            return Err(Error::Invalid(format!("{what} of sample {i} must be positive, got {}", scales[i])));
        }
    }
    Ok(parts)
}

fn dist(a: [f32; 2], b: [f32; 2]) -> f64 {
    (a[0] as f64 - b[0] as f64).hypot(a[1] as f64 - b[1] as f64)
}

/// Distances divided by the per-sample scale, visible parts only.
pub fn normalized_errors(preds: &[Vec<[f32; 2]>], gts: &[Vec<[f32; 2]>], visible: &[Vec<bool>], scales: &[f32]) -> Result<Vec<f64>> {
    check_sets(preds, gts, visible, scales, "scale")?;
    let mut out = vec![];
    for i in 0..gts.len() {
        for k in 0..gts[i].len() {
            if visible[i][k] {
                out.push(dist(preds[i][k], gts[i][k]) / scales[i] as f64);
            }
        }
    }
    Ok(out)
}

/// Fraction of visible parts within `threshold * head_size`, per part; the
/// aggregate averages the parts that have at least one annotation. The
/// curve covers normalized errors in `[0, threshold]`.
pub fn pckh(
    preds: &[Vec<[f32; 2]>],
    gts: &[Vec<[f32; 2]>],
    visible: &[Vec<bool>],
    head_sizes: &[f32],
    threshold: f64,
) -> Result<EvalReport> {
    let parts = check_sets(preds, gts, visible, head_sizes, "head size")?;
    let mut hits = vec![0usize; parts];
    let mut total = vec![0usize; parts];
    for i in 0..gts.len() {
        for k in 0..parts {
            if visible[i][k] {
                total[k] += 1;
                if dist(preds[i][k], gts[i][k]) <= threshold * head_sizes[i] as f64 {
                    hits[k] += 1;
                }
            }
        }
    }
    let per_part: Vec<Option<f64>> = hits.iter().zip(&total).map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64)).collect();
    let errors = normalized_errors(preds, gts, visible, head_sizes)?;
    let thresholds: Vec<f64> = (0..100).map(|i| threshold * (i as f64 / 99.0)).collect();
    Ok(EvalReport {
        metric: format!("PCKh@{threshold}"),
        part_names: vec![],
        aggregate: mean_some(&per_part),
        per_part,
        curve: Some(cumulative_curve(&errors, &thresholds)),
    })
}

fn mean_some(v: &[Option<f64>]) -> f64 {
    let vals: Vec<f64> = v.iter().flatten().copied().collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Normalized mean error in percent. Per part: mean over samples where the
/// part is visible; aggregate: mean over every visible (sample, part). The
/// curve is the cumulative distribution of per-sample NME.
pub fn nme(preds: &[Vec<[f32; 2]>], gts: &[Vec<[f32; 2]>], visible: &[Vec<bool>], normalizers: &[f32]) -> Result<EvalReport> {
    let parts = check_sets(preds, gts, visible, normalizers, "normalizer")?;
    let mut sum = vec![0.0f64; parts];
    let mut count = vec![0usize; parts];
    let mut per_sample = vec![];
    for i in 0..gts.len() {
        let (mut s, mut c) = (0.0, 0);
        for k in 0..parts {
            if visible[i][k] {
                let e = 100.0 * dist(preds[i][k], gts[i][k]) / normalizers[i] as f64;
                sum[k] += e;
                count[k] += 1;
                s += e;
                c += 1;
            }
        }
        if c > 0 {
            per_sample.push(s / c as f64);
        }
    }
    let n: usize = count.iter().sum();
    let aggregate = if n == 0 { 0.0 } else { sum.iter().sum::<f64>() / n as f64 };
    Ok(EvalReport {
        metric: "NME%".into(),
        part_names: vec![],
        per_part: sum.iter().zip(&count).map(|(&s, &c)| (c > 0).then(|| s / c as f64)).collect(),
        aggregate,
        curve: Some(cumulative_curve(&per_sample, &default_thresholds(&per_sample))),
    })
}

/// 100 evenly spaced thresholds over `[0, max error]`.
pub fn default_thresholds(errors: &[f64]) -> Vec<f64> {
    let max = errors.iter().copied().fold(0.0f64, f64::max);
    (0..100).map(|i| max * (i as f64 / 99.0)).collect()
}

/// Fraction of `errors` that are `<= t` for each threshold `t`. An empty
/// error list is vacuously all-within.
pub fn cumulative_curve(errors: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    thresholds
        .iter()
        .map(|&t| {
            let frac = if sorted.is_empty() { 1.0 } else { sorted.partition_point(|&e| e <= t) as f64 / sorted.len() as f64 };
            (t, frac)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Segmentation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub pixel_acc: f64,
    pub mean_acc: f64,
    pub mean_iu: f64,
    /// `confusion[gt][pred]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
}

/// Confusion-matrix scores. Classes with no ground-truth pixels are left
/// out of the mean accuracy, classes absent from both maps out of the mean IU.
pub fn seg_metrics(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<SegMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Length(format!("{} predicted vs {} ground-truth labels", pred.len(), gt.len())));
    }
    let mut n = vec![vec![0u64; num_classes]; num_classes];
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if p as usize >= num_classes || g as usize >= num_classes {
            return Err(Error::Invalid(format!("label {} at pixel {i} outside {num_classes} classes", p.max(g))));
        }
        n[g as usize][p as usize] += 1;
    }
    let t: Vec<u64> = n.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<u64> = (0..num_classes).map(|j| n.iter().map(|r| r[j]).sum()).collect();
    let diag: Vec<u64> = (0..num_classes).map(|i| n[i][i]).collect();
    let total: u64 = t.iter().sum();
    let pixel_acc = if total == 0 { 1.0 } else { diag.iter().sum::<u64>() as f64 / total as f64 };
    let accs: Vec<f64> = (0..num_classes).filter(|&i| t[i] > 0).map(|i| diag[i] as f64 / t[i] as f64).collect();
    let ius: Vec<f64> = (0..num_classes)
        .filter(|&i| t[i] + col[i] > 0)
        .map(|i| diag[i] as f64 / (t[i] + col[i] - diag[i]) as f64)
        .collect();
    let mean = |v: &[f64]| if v.is_empty() { 1.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(SegMetrics { pixel_acc, mean_acc: mean(&accs), mean_iu: mean(&ius), confusion: n })
}

pub mod face {
    //! Seven-class face-part masks from 68-point annotations.

    pub const BACKGROUND: u8 = 0;
    pub const SKIN: u8 = 1;
    pub const LOWER_LIP: u8 = 2;
    pub const UPPER_LIP: u8 = 3;
    pub const INNER_MOUTH: u8 = 4;
    pub const EYES: u8 = 5;
    pub const NOSE: u8 = 6;
    pub const NUM_CLASSES: usize = 7;
    pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "skin", "lower_lip", "upper_lip", "inner_mouth", "eyes", "nose"];

    pub const NOSE_POLY: [usize; 6] = [27, 31, 32, 33, 34, 35];
    pub const RIGHT_EYE: [usize; 6] = [36, 37, 38, 39, 40, 41];
    pub const LEFT_EYE: [usize; 6] = [42, 43, 44, 45, 46, 47];
    pub const UPPER_LIP_POLY: [usize; 12] = [48, 49, 50, 51, 52, 53, 54, 64, 63, 62, 61, 60];
    pub const LOWER_LIP_POLY: [usize; 12] = [54, 55, 56, 57, 58, 59, 48, 60, 67, 66, 65, 64];
    pub const INNER_MOUTH_POLY: [usize; 8] = [60, 61, 62, 63, 64, 65, 66, 67];
}

/// Shoelace area.
pub fn polygon_area(poly: &[[f32; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] as f64 * b[1] as f64 - b[0] as f64 * a[1] as f64
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Monotone-chain convex hull, counter-clockwise.
pub fn convex_hull(points: &[[f32; 2]]) -> Vec<[f32; 2]> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let cross = |o: [f32; 2], a: [f32; 2], b: [f32; 2]| {
        (a[0] as f64 - o[0] as f64) * (b[1] as f64 - o[1] as f64) - (a[1] as f64 - o[1] as f64) * (b[0] as f64 - o[0] as f64)
    };
    let mut hull: Vec<[f32; 2]> = vec![];
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f32; 2]>> = if pass == 0 { Box::new(p.iter()) } else { Box::new(p.iter().rev()) };
        for &q in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
    }
    hull
}

fn inside(poly: &[[f32; 2]], x: f32, y: f32) -> bool {
    let mut c = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + n - 1) % n]);
        if (a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0] {
            c = !c;
        }
    }
    c
}

fn fill(mask: &mut [u8], width: usize, poly: &[[f32; 2]], label: u8, what: &str) {
    if polygon_area(poly) < 1e-6 {
        log::warn!("degenerate {what} polygon, region left empty");
        return;
    }
    let (lo, hi) = poly.iter().fold(([f32::MAX; 2], [f32::MIN; 2]), |(lo, hi), p| {
        ([lo[0].min(p[0]), lo[1].min(p[1])], [hi[0].max(p[0]), hi[1].max(p[1])])
    });
    let height = mask.len() / width;
    let y0 = lo[1].floor().max(0.0) as usize;
    let y1 = (hi[1].ceil().max(0.0) as usize).min(height.saturating_sub(1));
    let x0 = lo[0].floor().max(0.0) as usize;
    let x1 = (hi[0].ceil().max(0.0) as usize).min(width.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            if inside(poly, x as f32, y as f32) {
                mask[y * width + x] = label;
            }
        }
    }
}

/// Rasterizes the seven face classes; pixel `(x, y)` is tested at its
/// integer coordinates. Skin is the hull of all points; nose, eyes and lips
/// override skin, and the inner mouth overrides the lips.
pub fn mask_from_landmarks(landmarks: &[[f32; 2]], width: usize, height: usize) -> Result<Vec<u8>> {
    use face::*;
    if landmarks.len() != 68 {
        return Err(Error::Length(format!("expected 68 landmarks, got {}", landmarks.len())));
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| landmarks[i]).collect::<Vec<_>>();
    let mut mask = vec![BACKGROUND; width * height];
    fill(&mut mask, width, &convex_hull(landmarks), SKIN, "face hull");
    fill(&mut mask, width, &pick(&NOSE_POLY), NOSE, "nose");
    fill(&mut mask, width, &pick(&RIGHT_EYE), EYES, "right eye");
    fill(&mut mask, width, &pick(&LEFT_EYE), EYES, "left eye");
    fill(&mut mask, width, &pick(&UPPER_LIP_POLY), UPPER_LIP, "upper lip");
    fill(&mut mask, width, &pick(&LOWER_LIP_POLY), LOWER_LIP, "lower lip");
    fill(&mut mask, width, &pick(&INNER_MOUTH_POLY), INNER_MOUTH, "inner mouth");
    Ok(mask)
}
