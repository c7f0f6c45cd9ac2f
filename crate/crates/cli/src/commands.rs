use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use graphrta::checkpoint::{Checkpoint, MAGIC};
use graphrta::eval::{format_embeddings, EvalReport};
use graphrta::graph::io::{load_graph_dir, load_labels, write_graph_dir};
use graphrta::graph::relabel_openset;
use graphrta::graph::synth::{generate_raw, GeneratorSpec};
use graphrta::graph::DomainPair;
use graphrta::rewire::{parse_edit_log, FlipKind};
use graphrta::train::{run_training, TrainConfig};
use rayon::prelude::*;

use crate::config::{content_hash, Manifest, Overrides, RawData, RunConfig};
use crate::UsageError;

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn generate(spec_path: &Path, out: &Path, seed: u64) -> Result<()> {
    let text = fs::read_to_string(spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: GeneratorSpec =
        serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", spec_path.display())))?;
    let problems = spec.problems();
    if !problems.is_empty() {
        bail!(UsageError(problems.join("; ")));
    }
    let (source, target) = generate_raw(&spec, seed)?;
    write_graph_dir(out.join("source"), &source)?;
    write_graph_dir(out.join("target"), &target)?;
    let config = serde_json::to_value(&spec)?;
    let src = out.join("source");
    let tgt = out.join("target");
    Manifest {
        command: "generate".into(),
        content_hash: content_hash(&config.to_string(), &[&src, &tgt])?,
        config,
        seeds: vec![seed],
        datasets: vec![src, tgt],
        out: out.to_path_buf(),
    }
    .write(out)?;
    log::info!(
        "wrote {} source and {} target nodes to {}",
        source.node_count(),
        target.node_count(),
        out.display()
    );
    Ok(())
}

/// Metrics of one finished seed.
struct SeedResult {
    seed: u64,
    report: EvalReport,
    selected_epoch: usize,
}

/// Trains one seed and writes its artifacts under `dir`.
fn train_seed(pair: &DomainPair, train: &TrainConfig, seed: u64, dir: &Path) -> Result<SeedResult> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let cfg = TrainConfig { seed, ..train.clone() };
    let out = run_training(pair, &cfg).with_context(|| format!("training seed {seed}"))?;

    let mut metrics = String::new();
    for m in &out.metrics {
        metrics.push_str(&serde_json::to_string(m)?);
        metrics.push('\n');
    }
    write(&dir.join("metrics.jsonl"), &metrics)?;

    let mut log = String::from("# epoch u v kind score\n");
    for r in &out.edits {
        writeln!(log, "{r}")?;
    }
    write(&dir.join("edits.log"), &log)?;

    out.checkpoint.save(&dir.join("checkpoint.bin"))?;
    let report = out.checkpoint.evaluate_with_mmd(&pair.target)?;
    write(&dir.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;

    let view = out.checkpoint.infer(&pair.target)?;
    let emb = format_embeddings(&view.embeddings, &pair.target.labels, &view.predictions)?;
    write(&dir.join("embeddings.txt"), &emb)?;
    log::info!(
        "seed {seed}: h={:.4} acc={:.4} (epoch {})",
        report.h_score,
        report.acc,
        out.selected_epoch
    );
    Ok(SeedResult {
        seed,
        report,
        selected_epoch: out.selected_epoch,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(workers).build()?)
}

fn manifest(command: &str, cfg: &RunConfig) -> Result<Manifest> {
    let config = serde_json::to_value(cfg)?;
    let src = cfg.dataset_src.clone().expect("validated");
    let tgt = cfg.dataset_tgt.clone().expect("validated");
    Ok(Manifest {
        command: command.into(),
        content_hash: content_hash(&config.to_string(), &[&src, &tgt])?,
        config,
        seeds: cfg.seeds.clone(),
        datasets: vec![src, tgt],
        out: cfg.out_dir().to_path_buf(),
    })
}

pub fn train(config: Option<&Path>, o: &Overrides) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    cfg.apply(o);
    cfg.validate_for_training()?;
    let out = cfg.out_dir().to_path_buf();
    let data = RawData::load(&cfg)?;
    let pair = data.pair(cfg.known_count.expect("validated"))?;
    manifest("train", &cfg)?.write(&out)?;

    let results: Vec<SeedResult> = pool(cfg.workers)?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&s| train_seed(&pair, &cfg.train, s, &out.join(format!("seed-{s}"))))
            .collect::<Result<_>>()
    })?;

    let mut csv = String::from("seed,acc,acc_tk,acc_tu,h_score,mmd_before,mmd_after,selected_epoch\n");
    for r in &results {
        let p = &r.report;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.seed,
            p.acc,
            p.acc_tk,
            p.acc_tu,
            p.h_score,
            opt(p.mmd_before),
            opt(p.mmd_after),
            r.selected_epoch
        )?;
    }
    let col = |f: fn(&EvalReport) -> f64| results.iter().map(|r| f(&r.report)).collect::<Vec<_>>();
    let stats = [
        mean_std(&col(|r| r.acc)),
        mean_std(&col(|r| r.acc_tk)),
        mean_std(&col(|r| r.acc_tu)),
        mean_std(&col(|r| r.h_score)),
    ];
    writeln!(csv, "mean,{},{},{},{},,,", stats[0].0, stats[1].0, stats[2].0, stats[3].0)?;
    writeln!(csv, "std,{},{},{},{},,,", stats[0].1, stats[1].1, stats[2].1, stats[3].1)?;
    write(&out.join("summary.csv"), &csv)?;
    println!(
        "h_score {:.4} ± {:.4}, acc {:.4} ± {:.4} over {} seed(s)",
        stats[3].0,
        stats[3].1,
        stats[0].0,
        stats[0].1,
        results.len()
    );
    Ok(())
}

pub struct EvaluateArgs<'a> {
    pub checkpoint: &'a Path,
    pub config: Option<&'a Path>,
    pub dataset_tgt: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn evaluate(a: EvaluateArgs<'_>) -> Result<()> {
    let cfg = RunConfig::load(a.config)?;
    let Some(dir) = a.dataset_tgt.or(cfg.dataset_tgt) else {
        bail!(UsageError("a target dataset (--dataset-tgt) is required".into()));
    };
    let ckpt = Checkpoint::load(a.checkpoint)?;
    let mut target = load_graph_dir(&dir).with_context(|| format!("loading {}", dir.display()))?;
    if cfg.row_normalize {
        target.l2_normalize_rows();
    }
    if let Some(path) = &a.labels {
        let labels = load_labels(path)?;
        if labels.len() != target.node_count() {
            bail!("{}: {} labels for {} nodes", path.display(), labels.len(), target.node_count());
        }
        target.class_count = labels.iter().flatten().max().map_or(0, |&m| m + 1);
        target.labels = labels;
    }
    let known: Vec<usize> = (0..ckpt.model.dims.known_count).collect();
    let target = relabel_openset(&target, &known)?;
    let report = ckpt.evaluate_with_mmd(&target)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    let out = a.out.unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("evaluation.json")
    });
    write(&out, &text)?;
    std::io::stdout().write_all(text.as_bytes())?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Rho,
    Budget,
    KnownCount,
    Variant,
}

/// One arm of a sweep: a label, the training config and the known count.
struct Arm {
    label: String,
    train: TrainConfig,
    known_count: usize,
}

fn arms(cfg: &RunConfig, axis: Axis) -> Result<Vec<Arm>> {
    let base = cfg.known_count.expect("validated");
    let with = |label: String, train: TrainConfig, known_count: usize| Arm {
        label,
        train,
        known_count,
    };
    let a = &cfg.ablate;
    let arms: Vec<Arm> = match axis {
        Axis::Rho => a
            .rho
            .iter()
            .map(|&r| with(r.to_string(), TrainConfig { rho: r, ..cfg.train.clone() }, base))
            .collect(),
        Axis::Budget => a
            .budget
            .iter()
            .map(|&b| with(b.to_string(), TrainConfig { budget_ratio: b, ..cfg.train.clone() }, base))
            .collect(),
        Axis::KnownCount => a
            .known_count
            .iter()
            .map(|&k| with(k.to_string(), cfg.train.clone(), k))
            .collect(),
        Axis::Variant => a
            .variant
            .iter()
            .map(|&v| with(v.to_string(), TrainConfig { variant: v, ..cfg.train.clone() }, base))
            .collect(),
    };
    if arms.is_empty() {
        bail!(UsageError(format!("no values listed for axis {axis:?} under \"ablate\"")));
    }
    let mut problems: Vec<String> = arms.iter().flat_map(|a| a.train.problems()).collect();
    problems.dedup();
    if !problems.is_empty() {
        bail!(UsageError(problems.join("; ")));
    }
    Ok(arms)
}

pub fn ablate(config: Option<&Path>, axis: Axis, o: &Overrides) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    cfg.apply(o);
    cfg.validate_for_training()?;
    let arms = arms(&cfg, axis)?;
    let out = cfg.out_dir().to_path_buf();
    let data = RawData::load(&cfg)?;
    manifest("ablate", &cfg)?.write(&out)?;
    let axis_name = match axis {
        Axis::Rho => "rho",
        Axis::Budget => "budget",
        Axis::KnownCount => "known_count",
        Axis::Variant => "variant",
    };

    let pairs: Vec<DomainPair> = arms
        .iter()
        .map(|a| data.pair(a.known_count))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, u64)> = (0..arms.len())
        .flat_map(|i| cfg.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<(usize, SeedResult)> = pool(cfg.workers)?.install(|| {
        jobs.par_iter()
            .map(|&(i, s)| {
                let dir = out.join(format!("{axis_name}-{}", arms[i].label)).join(format!("seed-{s}"));
                train_seed(&pairs[i], &arms[i].train, s, &dir).map(|r| (i, r))
            })
            .collect::<Result<_>>()
    })?;

    let mut csv = format!("{axis_name},mean_h,std_h,mean_acc,std_acc\n");
    for (i, arm) in arms.iter().enumerate() {
        let h: Vec<f64> = results.iter().filter(|r| r.0 == i).map(|r| r.1.report.h_score).collect();
        let acc: Vec<f64> = results.iter().filter(|r| r.0 == i).map(|r| r.1.report.acc).collect();
        let (mh, sh) = mean_std(&h);
        let (ma, sa) = mean_std(&acc);
        writeln!(csv, "{},{mh},{sh},{ma},{sa}", arm.label)?;
    }
    write(&out.join("summary.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn inspect(path: &Path) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(MAGIC) {
        let c = Checkpoint::from_bytes(&bytes)?;
        let d = &c.model.dims;
        println!("checkpoint {}", path.display());
        println!("seed {}", c.seed);
        println!("input {} layers {:?} known {} disc_hidden {}", d.input, d.layers, d.known_count, d.disc_hidden);
        println!("activation {:?}", c.model.extractor.activation);
        println!("rule {:?}", c.rule);
        for (l, layer) in c.model.extractor.layers.iter().enumerate() {
            let m = &layer.mask;
            println!(
                "layer {l} mask {}x{} zero fraction {:.4}",
                m.rows(),
                m.cols(),
                m.count_zeros() as f64 / m.len().max(1) as f64
            );
        }
        let norm = c.feature_delta.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("feature delta {}x{} frobenius {norm:.6}", c.feature_delta.rows(), c.feature_delta.cols());
        println!("flips {}", c.flips.len());
        return Ok(());
    }
    let text = String::from_utf8(bytes).map_err(|_| UsageError(format!("{}: unrecognized file", path.display())))?;
    let records = parse_edit_log(&text)?;
    let adds = records.iter().filter(|r| r.kind == FlipKind::Add).count();
    let epochs: std::collections::BTreeSet<usize> = records.iter().map(|r| r.epoch).collect();
    println!("edit log {}", path.display());
    println!("flips {} (add {adds}, del {})", records.len(), records.len() - adds);
    println!("epochs with edits {}", epochs.len());
    Ok(())
}
