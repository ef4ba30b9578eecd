use std::fs;
use std::path::Path;
use std::time::Duration;

use bhg::bitops::packed_gemm_bench;
use bhg::blocks::BlockKind;
use bhg::data::{load_manifest, synth_dataset, Dataset, SynthConfig};
use bhg::eval::curve_svg;
use bhg::experiments::{run_suite, Protocol, Suite, VAL_SEED_SALT};
use bhg::model_io::{self, storage_census};
use bhg::nets::{layer_census, Model, NetworkSpec};
use bhg::train::{evaluate, train, train_stacked, AugmentConfig, TrainConfig};
use bhg::{Error, Result, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::args::*;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::CountParams(a) => count_params(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Export(a) => cmd_export(&a),
        Command::Import(a) => cmd_import(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

fn millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

fn count(spec: &NetworkSpec) -> Result<usize> {
    Ok(bhg::nets::build_network(spec)?.count_params())
}

fn count_params(a: &CountArgs) -> Result<()> {
    if !a.table2 {
        let n = count(&a.net.full_spec())?;
        println!("{}\t{n}\t{}", a.net.block, millions(n));
        return Ok(());
    }
    let mut rows: Vec<(String, NetworkSpec)> = BlockKind::TABLE
        .iter()
        .map(|&b| (b.to_string(), NetworkSpec::full(b)))
        .collect();
    rows.push(("hpm (improved HG)".into(), NetworkSpec { improved: true, ..NetworkSpec::full(BlockKind::HpmFull) }));
    for s in [2, 3] {
        rows.push((format!("hpm x{s} stacks"), NetworkSpec { stacks: s, ..NetworkSpec::full(BlockKind::HpmFull) }));
    }
    println!("{:<20} {:>12} {:>8}", "network", "params", "");
    for (label, spec) in rows {
        let n = count(&spec)?;
        println!("{label:<20} {n:>12} {:>8}", millions(n));
    }
    Ok(())
}

fn synthetic(d: &DataArgs, n: usize, seed: u64) -> Result<Dataset> {
    synth_dataset(&SynthConfig::new(n, d.image_size, d.parts, seed))
}

fn load_data(d: &DataArgs, seed: u64) -> Result<Dataset> {
    match (&d.dataset, d.synthetic) {
        (Some(path), _) => load_manifest(path),
        (None, true) => synthetic(d, d.samples, seed),
        (None, false) => Err(Error::Invalid("one of --dataset or --synthetic is required".into())),
    }
}

fn input_channels(data: &Dataset) -> Result<usize> {
    if data.is_empty() {
        return Err(Error::data(None, "dataset is empty"));
    }
    Ok(data.get(0)?.image.shape().c)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let data = load_data(&a.data, a.seed)?;
    let val = match (&a.val_dataset, a.data.synthetic) {
        (Some(p), _) => Some(load_manifest(p)?),
        (None, true) => Some(synthetic(&a.data, a.val_samples, a.seed ^ VAL_SEED_SALT)?),
        (None, false) => None,
    };
    let mut spec = if a.full { a.net.apply(NetworkSpec::full(a.net.block)) } else { a.net.desk_spec(data.num_parts()) };
    spec.num_outputs = data.num_parts();
    spec.input_channels = input_channels(&data)?;
    let config = TrainConfig {
        epochs: a.epochs,
        joint_epochs: a.joint_epochs,
        epoch_scale: a.epoch_scale,
        lr: a.lr,
        final_lr: a.final_lr,
        batch_size: a.batch_size,
        loss: a.loss.into(),
        seed: a.seed,
        augment: if a.no_augment { AugmentConfig::disabled() } else { AugmentConfig::default() },
        ..TrainConfig::default()
    };
    fs::create_dir_all(&a.out)?;
    let log_path = a.out.join("train_log.jsonl");
    if log_path.exists() {
        fs::remove_file(&log_path)?;
    }
    let mut model = Model::new(&spec, a.seed)?;
    let log = if spec.stacks > 1 {
        let (trained, log) = train_stacked(&model, &data, val.as_ref(), &config, Some(&log_path))?;
        model = trained;
        log
    } else {
        train(&mut model, &data, val.as_ref(), &config, Some(&log_path))?
    };
    let model_path = a.out.join("model.bhg");
    let bytes = model_io::save(&model, &model_path)?;
    let eval_set = val.as_ref().unwrap_or(&data);
    let (loss, report) = evaluate(&model, eval_set, &config)?;
    let summary = serde_json::json!({
        "spec": spec,
        "params": layer_census(&model.network).total_params,
        "epochs": config.effective_epochs(),
        "final_train_loss": log.train_losses().last(),
        "eval_loss": loss,
        "metric": report.metric,
        "value": report.aggregate,
        "model_bytes": bytes,
    });
    write(&a.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{} {:.4} (loss {loss:.4}); model written to {}", report.metric, report.aggregate, model_path.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = model_io::load(&a.model)?;
    let data = load_data(&a.data, a.seed ^ VAL_SEED_SALT)?;
    let config = TrainConfig { batch_size: a.batch_size, ..TrainConfig::default() };
    let (loss, report) = evaluate(&model, &data, &config)?;
    fs::create_dir_all(&a.out)?;
    write(&a.out.join("report.json"), report.to_json()?)?;
    write(&a.out.join("report.csv"), report.to_csv())?;
    if let Some(svg) = report.curve_svg() {
        write(&a.out.join("curve.svg"), svg)?;
    }
    println!("{} {:.4} over {} samples (loss {loss:.4})", report.metric, report.aggregate, data.len());
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    if a.size == 0 {
        return Err(Error::Invalid("--size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let r = packed_gemm_bench(a.size, Duration::from_millis(a.min_ms), &mut rng)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&r)?);
    } else {
        println!("size      {}", r.size);
        println!("packed    {:.3} Gop/s", r.packed_ops_per_sec / 1e9);
        println!("float     {:.3} Gop/s", r.float_ops_per_sec / 1e9);
        println!("speedup   {:.2}x", r.speedup);
        println!("verified  {} (row {})", r.cross_check_ok, r.checked_row);
    }
    if !r.cross_check_ok {
        return Err(Error::Numerical { epoch: 0, msg: "packed GEMM disagrees with the float GEMM".into() });
    }
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let model = match &a.model {
        Some(p) => model_io::load(p)?,
        None => {
            let spec = if a.desk { a.net.desk_spec(a.parts) } else { NetworkSpec { num_outputs: a.parts, ..a.net.full_spec() } };
            Model::new(&spec, a.seed)?
        }
    };
    let bytes = model_io::save(&model, &a.out)?;
    let census = storage_census(&model)?;
    let layers = layer_census(&model.network);
    println!("wrote {} ({bytes} bytes)", a.out.display());
    println!("params {} ({} binary, {:.2}% real)", layers.total_params, layers.binary_params, 100.0 * layers.real_fraction);
    println!("{:<58} {:>12} {:>12}", "item", "packed", "all-real");
    for i in &census.items {
        println!("{:<58} {:>12} {:>12}", i.category, i.packed_bytes, i.real_bytes);
    }
    println!("{:<58} {:>12} {:>12}", "total", census.packed_total, census.real_total);
    println!("compression_ratio {:.2}", model_io::compression_ratio(&model)?);
    println!("bits-only ratio   {:.2}", census.bits_only_ratio);
    Ok(())
}

fn cmd_import(a: &ImportArgs) -> Result<()> {
    let bytes = fs::read(&a.path)?;
    let model = model_io::import(&bytes)?;
    let again = model_io::export(&model)?;
    if again != bytes {
        return Err(Error::Format("re-export differs from the file".into()));
    }
    let copy = model_io::import(&again)?;
    let spec = model.spec();
    let side = spec.input_multiple().max(32);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for _ in 0..a.inputs {
        let x = Tensor::from_fn(Shape::new(1, spec.input_channels, side, side), |_, _, _, _| rng.gen_range(0.0..1.0));
        let (p, q) = (model.predict(&x)?, copy.predict(&x)?);
        if p.iter().zip(&q).any(|(p, q)| p.data() != q.data()) {
            return Err(Error::Format("forward outputs differ after a round trip".into()));
        }
    }
    println!("{}: {} {} stack(s), {} params", a.path.display(), spec.block, spec.stacks, model.network.count_params());
    println!("checksum ok; re-export identical; forward identical on {} input(s)", a.inputs);
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let mut p = Protocol::default();
    if let Some(e) = a.epochs {
        p.train.epochs = e;
    }
    if let Some(n) = a.samples {
        p.train_samples = n;
    }
    p.train.epoch_scale = a.epoch_scale;
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let report = run_suite(a.suite, &p, &seeds, &[])?;
    print!("{}", report.to_table());
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        write(&dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        write(&dir.join("report.csv"), report.to_csv())?;
        if a.suite == Suite::Depth {
            let curve: Vec<(f64, f64)> = (3..).zip(&report.rows).map(|(d, r)| (d as f64, r.mean)).collect();
            write(&dir.join("curve.svg"), curve_svg(&curve, "PCKh vs block depth"))?;
        }
    }
    Ok(())
}
