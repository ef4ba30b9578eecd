//! Desk-scale ablation suites on the synthetic stick-figure data. Every
//! variant of a suite shares the seed, so the training data, the
//! initialization of shared layers and the batch order are paired.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::blocks::BlockKind;
use crate::data::{synth_dataset, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::graph::PoolKind;
use crate::nets::{layer_census, Model, NetworkSpec};
use crate::train::{evaluate, train, train_stacked, AugmentConfig, LossKind, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Aug,
    Loss,
    Pool,
    Relu,
    Blocks,
    Depth,
    Cardinality,
    Stacks,
}

impl Suite {
    pub const ALL: [Suite; 8] =
        [Suite::Aug, Suite::Loss, Suite::Pool, Suite::Relu, Suite::Blocks, Suite::Depth, Suite::Cardinality, Suite::Stacks];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Aug => "aug",
            Suite::Loss => "loss",
            Suite::Pool => "pool",
            Suite::Relu => "relu",
            Suite::Blocks => "blocks",
            Suite::Depth => "depth",
            Suite::Cardinality => "cardinality",
            Suite::Stacks => "stacks",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown suite `{s}` (expected one of aug, loss, pool, relu, blocks, depth, cardinality, stacks)")))
    }
}

/// Shared experimental setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub image_size: usize,
    pub n_parts: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    /// Baseline network; suites vary one field of it.
    pub spec: NetworkSpec,
    pub train: TrainConfig,
}

impl Default for Protocol {
    fn default() -> Self {
        let n_parts = 10;
        Protocol {
            image_size: 64,
            n_parts,
            train_samples: 32,
            val_samples: 200,
            spec: NetworkSpec::desk(BlockKind::HpmFull, n_parts),
            train: TrainConfig { epochs: 48, lr: 5e-3, final_lr: 1e-3, batch_size: 2, joint_epochs: 20, ..TrainConfig::default() },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub spec: NetworkSpec,
    pub train: TrainConfig,
    /// Stage-wise training for stacked networks.
    pub stacked: bool,
}

/// Variants of `suite`, in the order their rows are reported.
pub fn variants(suite: Suite, p: &Protocol) -> Vec<Variant> {
    let base = |label: &str| Variant { label: label.into(), spec: p.spec.clone(), train: p.train.clone(), stacked: false };
    let with_spec = |label: String, f: &dyn Fn(&mut NetworkSpec)| {
        let mut v = base(&label);
        f(&mut v.spec);
        v
    };
    match suite {
        Suite::Aug => {
            let mut off = base("no augmentation");
            off.train.augment = AugmentConfig::disabled();
            vec![base("augmentation"), off]
        }
        Suite::Loss => {
            let mut l2 = base("pixel L2");
            l2.train.loss = LossKind::PixelL2;
            vec![base("sigmoid BCE"), l2]
        }
        Suite::Pool => vec![base("max pool"), with_spec("avg pool".into(), &|s| s.pool = PoolKind::Avg)],
        Suite::Relu => vec![with_spec("+ ReLU".into(), &|s| s.relu_after_conv = true), base("no ReLU")],
        Suite::Blocks => BlockKind::TABLE
            .iter()
            .map(|&b| with_spec(b.to_string(), &|s| *s = NetworkSpec { block: b, base_channels: desk_width(b), ..s.clone() }))
            .collect(),
        Suite::Depth => {
            (3..=8).map(|d| with_spec(format!("depth {d}"), &|s| s.block = BlockKind::HpmDepth(d))).collect()
        }
        Suite::Cardinality => [1, 2, 4]
            .into_iter()
            .map(|c| with_spec(format!("cardinality {c}"), &|s| s.block = BlockKind::HpmCardinality(c)))
            .collect(),
        Suite::Stacks => {
            let mut two = with_spec("2 stacks".into(), &|s| s.stacks = 2);
            two.stacked = true;
            vec![base("1 stack"), two]
        }
    }
}

/// Desk widths chosen so the bottleneck and reduced HPM networks have
/// about the same number of parameters.
pub fn desk_width(block: BlockKind) -> usize {
    match block {
        BlockKind::HpmReduced => 48,
        _ => 64,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub pckh: f64,
    pub params: usize,
    pub wall_ms: u64,
}

/// Mixed into the seed of validation sets so they never coincide with the
/// training set generated from the same seed.
pub const VAL_SEED_SALT: u64 = 0x005e_ed0f_7a11;

/// Paired train/validation sets for `seed`.
pub fn desk_data(p: &Protocol, seed: u64) -> Result<(Dataset, Dataset)> {
    let tr = synth_dataset(&SynthConfig::new(p.train_samples, p.image_size, p.n_parts, seed))?;
    let va = synth_dataset(&SynthConfig::new(p.val_samples, p.image_size, p.n_parts, seed ^ VAL_SEED_SALT))?;
    Ok((tr, va))
}

pub fn run_variant(v: &Variant, data: &(Dataset, Dataset), seed: u64) -> Result<RunResult> {
    let start = Instant::now();
    let config = TrainConfig { seed, ..v.train.clone() };
    let mut model = Model::new(&v.spec, seed)?;
    if v.stacked && v.spec.stacks > 1 {
        model = train_stacked(&model, &data.0, None, &config, None)?.0;
    } else {
        train(&mut model, &data.0, None, &config, None)?;
    }
    let (_, report) = evaluate(&model, &data.1, &config)?;
    Ok(RunResult {
        label: v.label.clone(),
        seed,
        pckh: report.aggregate,
        params: layer_census(&model.network).total_params,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteRow {
    pub label: String,
    pub params: usize,
    pub pckh: Vec<f64>,
    pub mean: f64,
    /// Training and evaluation time summed over seeds, cached runs included.
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seeds: Vec<u64>,
    pub rows: Vec<SuiteRow>,
    pub caveat: String,
}

pub const CAVEAT: &str =
    "desk scale: synthetic stick figures, small networks, few epochs; compare orderings between rows, not absolute PCKh";

impl SuiteReport {
    pub fn row(&self, label: &str) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Seeds on which row `a` scores at least (or, if `strict`, more than) row `b`.
    pub fn wins(&self, a: &str, b: &str, strict: bool) -> Option<usize> {
        let (a, b) = (self.row(a)?, self.row(b)?);
        Some(a.pckh.iter().zip(&b.pckh).filter(|(x, y)| if strict { x > y } else { x >= y }).count())
    }

    /// Compute time of the whole suite.
    pub fn wall_ms(&self) -> u64 {
        self.rows.iter().map(|r| r.wall_ms).sum()
    }

    /// Rows sorted by mean PCKh, best first.
    pub fn ranked(&self) -> Vec<&SuiteRow> {
        let mut r: Vec<&SuiteRow> = self.rows.iter().collect();
        r.sort_by(|a, b| b.mean.total_cmp(&a.mean));
        r
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("suite {} ({} seeds)\n# {}\n", self.suite, self.seeds.len(), self.caveat);
        s.push_str(&format!("{:<4} {:<18} {:>10} {:>10}  per-seed\n", "rank", "variant", "params", "PCKh"));
        for (i, r) in self.ranked().iter().enumerate() {
            let per: Vec<String> = r.pckh.iter().map(|v| format!("{v:.3}")).collect();
            s.push_str(&format!("{:<4} {:<18} {:>10} {:>10.4}  {}\n", i + 1, r.label, r.params, r.mean, per.join(" ")));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,params,seed,pckh\n");
        for r in &self.rows {
            for (seed, v) in self.seeds.iter().zip(&r.pckh) {
                s.push_str(&format!("{},{},{seed},{v}\n", r.label, r.params));
            }
        }
        s
    }
}

/// Validation PCKh of finished runs, keyed by configuration and seed.
/// Suites share their baseline row, so a cache lets several suites reuse it.
#[derive(Debug, Default)]
pub struct RunCache {
    runs: HashMap<(String, u64), RunResult>,
}

impl RunCache {
    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}

fn run_key(v: &Variant) -> Result<String> {
    Ok(serde_json::to_string(&(&v.spec, &v.train, v.stacked))?)
}

/// Runs `labels` (all variants if empty) of `suite` for every seed.
pub fn run_suite(suite: Suite, p: &Protocol, seeds: &[u64], labels: &[&str]) -> Result<SuiteReport> {
    run_suite_cached(suite, p, seeds, labels, &mut RunCache::default())
}

pub fn run_suite_cached(suite: Suite, p: &Protocol, seeds: &[u64], labels: &[&str], cache: &mut RunCache) -> Result<SuiteReport> {
    let vs: Vec<Variant> = variants(suite, p).into_iter().filter(|v| labels.is_empty() || labels.contains(&v.label.as_str())).collect();
    let mut rows: Vec<SuiteRow> =
        vs.iter().map(|v| SuiteRow { label: v.label.clone(), params: 0, pckh: vec![], mean: 0.0, wall_ms: 0 }).collect();
    for &seed in seeds {
        let mut data = None;
        for (v, row) in vs.iter().zip(rows.iter_mut()) {
            let key = (run_key(v)?, seed);
            let r = match cache.runs.get(&key) {
                Some(r) => r.clone(),
                None => {
                    if data.is_none() {
                        data = Some(desk_data(p, seed)?);
                    }
                    let r = run_variant(v, data.as_ref().expect("generated above"), seed)?;
                    log::info!("{suite} seed {seed} {}: PCKh {:.4} ({} ms)", v.label, r.pckh, r.wall_ms);
                    cache.runs.insert(key, r.clone());
                    r
                }
            };
            row.params = r.params;
            row.pckh.push(r.pckh);
            row.wall_ms += r.wall_ms;
        }
    }
    for r in &mut rows {
        r.mean = r.pckh.iter().sum::<f64>() / r.pckh.len().max(1) as f64;
    }
    Ok(SuiteReport { suite, seeds: seeds.to_vec(), rows, caveat: CAVEAT.into() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn variants_differ_in_one_factor() {
        let p = Protocol::default();
        let aug = variants(Suite::Aug, &p);
        assert_eq!(aug[0].spec, aug[1].spec);
        assert!(aug[0].train.augment.enabled && !aug[1].train.augment.enabled);
        let pool = variants(Suite::Pool, &p);
        assert_eq!(pool[0].train, pool[1].train);
        assert_eq!(pool[1].spec.pool, PoolKind::Avg);
        assert_eq!(variants(Suite::Blocks, &p).len(), 6);
        assert_eq!(variants(Suite::Depth, &p).len(), 6);
        assert!(variants(Suite::Stacks, &p)[1].stacked);
    }

    #[test]
    fn tiny_suite_runs() {
        let mut p = Protocol::default();
        p.train_samples = 4;
        p.val_samples = 4;
        p.image_size = 32;
        p.train.epochs = 1;
        p.train.batch_size = 4;
        let r = run_suite(Suite::Pool, &p, &[1, 2], &[]).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows.iter().all(|row| row.pckh.len() == 2 && row.params > 0));
        assert!(r.wins("max pool", "avg pool", false).unwrap() <= 2);
        assert!(r.to_table().contains("avg pool"));
        assert_eq!(r.to_csv().lines().count(), 5);

        // The max-pool row is the shared baseline, so the ReLU suite reuses it.
        let mut cache = RunCache::default();
        let pool = run_suite_cached(Suite::Pool, &p, &[1], &[], &mut cache).unwrap();
        assert_eq!(cache.len(), 2);
        let relu = run_suite_cached(Suite::Relu, &p, &[1], &[], &mut cache).unwrap();
        assert_eq!(cache.len(), 3);
        assert_eq!(relu.row("no ReLU").unwrap().pckh, pool.row("max pool").unwrap().pckh);
        assert_eq!(pool.row("max pool").unwrap().pckh, r.row("max pool").unwrap().pckh[..1]);
    }
}
