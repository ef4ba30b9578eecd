use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::Graph;
use crate::tensor::Tensor;

use super::exec::{backward_with, forward, Mode};
use super::params::ParamStore;

/// Outcome of comparing one analytic gradient with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// `||fd - analytic|| / max(||analytic||, ||fd||)` over the checked entries.
    pub rel_err: f64,
    pub checked: usize,
}

fn projected_loss(graph: &Arc<Graph>, store: &ParamStore, inputs: &[Tensor], proj: &[Tensor]) -> Result<f64> {
    let mut s = store.clone();
    let (outs, _) = forward(graph, &mut s, inputs, Mode::Train)?;
    Ok(outs
        .iter()
        .zip(proj)
        .map(|(o, r)| o.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>())
        .sum())
}

fn rel_err(fd: &[f64], an: &[f64]) -> f64 {
    let diff: f64 = fd.iter().zip(an).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = an.iter().map(|v| v * v).sum::<f64>().sqrt().max(fd.iter().map(|v| v * v).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn entries(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| i * len / max).collect()
    }
}

/// Central-difference check of the training-mode gradients of
/// `L = sum_o <r_o, out_o>` (random `r_o`) with respect to every trainable
/// parameter and every input. At most `max_entries` entries per tensor are
/// perturbed.
pub fn gradcheck(
    graph: &Arc<Graph>,
    store: &ParamStore,
    inputs: &[Tensor],
    step: f32,
    max_entries: usize,
    seed: u64,
) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = store.clone();
    s.zero_grad();
    let (outs, tape) = forward(graph, &mut s, inputs, Mode::Train)?;
    let proj: Vec<Tensor> = outs.iter().map(|o| Tensor::randn(o.shape(), 1.0, &mut rng)).collect();
    let input_grads = backward_with(&tape, &proj, &mut s, true)?;

    let mut report = vec![];
    let names: Vec<String> = store.iter().filter(|(_, p)| !p.frozen).map(|(n, _)| n.clone()).collect();
    for name in names {
        let analytic = s.get(&name)?.grad.clone();
        let idx = entries(analytic.len(), max_entries);
        let mut fd = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut probe = store.clone();
            let orig = probe.value(&name)?.data()[i];
            probe.get_mut(&name)?.value.data_mut()[i] = orig + step;
            let up = projected_loss(graph, &probe, inputs, &proj)?;
            probe.get_mut(&name)?.value.data_mut()[i] = orig - step;
            let down = projected_loss(graph, &probe, inputs, &proj)?;
            fd.push((up - down) / (2.0 * step as f64));
        }
        let an: Vec<f64> = idx.iter().map(|&i| analytic.data()[i] as f64).collect();
        report.push(GradCheck { rel_err: rel_err(&fd, &an), checked: idx.len(), name });
    }
    for (k, g) in input_grads.iter().enumerate() {
        let idx = entries(g.len(), max_entries);
        let mut fd = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut xs = inputs.to_vec();
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + step;
            let up = projected_loss(graph, store, &xs, &proj)?;
            xs[k].data_mut()[i] = orig - step;
            let down = projected_loss(graph, store, &xs, &proj)?;
            fd.push((up - down) / (2.0 * step as f64));
        }
        let an: Vec<f64> = idx.iter().map(|&i| g.data()[i] as f64).collect();
        report.push(GradCheck { name: format!("input{k}"), rel_err: rel_err(&fd, &an), checked: idx.len() });
    }
    Ok(report)
}
