use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cohar_core::checkpoint::{Checkpoint, WindowSpec};
use cohar_core::data::{split, write_csv, Dataset, Normalizer, SynthConfig};
use cohar_core::engine::{derive_seed, fnv1a64};
use cohar_core::gradcheck::{self, corrupted_case};
use cohar_core::metrics::{evaluate, predict_sequences, MetricsReport};
use cohar_core::model::{ConditionalUNet, IndependentUNet, LabelModel, Model};
use cohar_core::train::{train as fit, TrainHistory};
use cohar_core::{Error, SeededRng};
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig};
use crate::output::{prepare_out, write, CliError};

type CmdResult = Result<(), CliError>;

pub fn synth(config: Option<&Path>, out: &Path, force: bool) -> CmdResult {
    let cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<SynthConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    cfg.validate()?;
    let ds = cohar_core::data::generate_synthetic(&cfg)?;
    prepare_out(out, force)?;
    write_csv(&out.join("data.csv"), &ds)?;
    print!("{}", dataset_summary(&ds));
    Ok(())
}

fn dataset_summary(ds: &Dataset) -> String {
    let mut s = format!(
        "{} sequences, {} steps, {} channels at {} Hz\n",
        ds.sequences.len(),
        ds.total_steps(),
        ds.channels(),
        ds.sample_rate_hz
    );
    for (h, spec) in ds.labels.iter().enumerate() {
        let prev = ds.class_prevalence(h);
        let parts: Vec<String> = prev
            .iter()
            .enumerate()
            .map(|(c, p)| format!("{} {:.3}", spec.class_name(c), p))
            .collect();
        writeln!(s, "  {}: {}", spec.name, parts.join(", ")).unwrap();
    }
    s
}

/// Train/held-out split, normalized with statistics of the training part.
struct Prepared {
    train: Dataset,
    held_out: Dataset,
    normalizer: Option<Normalizer>,
}

fn prepare(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<Prepared, CliError> {
    let (mut train, mut held_out) = split(ds, cfg.split_frac, seed)?;
    let normalizer = if cfg.normalize {
        let n = Normalizer::fit(&train)?;
        n.apply(&mut train)?;
        n.apply(&mut held_out)?;
        Some(n)
    } else {
        None
    };
    Ok(Prepared {
        train,
        held_out,
        normalizer,
    })
}

fn build(cfg: &ExperimentConfig, ds: &Dataset, baseline: bool, order: &[String], seed: u64) -> Result<Model, CliError> {
    let mut rng = SeededRng::new(seed).stream("init");
    Ok(if baseline {
        Model::Baseline(IndependentUNet::build(ds.channels(), ds.labels.clone(), cfg.unet, &mut rng)?)
    } else {
        Model::Chain(ConditionalUNet::build(cfg.chain_config(ds, order)?, &mut rng)?)
    })
}

fn window_spec(cfg: &ExperimentConfig) -> WindowSpec {
    WindowSpec {
        length: cfg.train.window,
        stride: cfg.train.stride,
    }
}

#[derive(Serialize)]
struct SplitRecord<'a> {
    train: Vec<&'a str>,
    held_out: Vec<&'a str>,
}

pub fn train(config: &Path, baseline: bool, out: &Path, force: bool) -> CmdResult {
    let cfg = ExperimentConfig::from_file(config)?;
    if baseline && (cfg.generator != Default::default() || cfg.embedding_dims.is_some() || cfg.teacher_forcing) {
        eprintln!("warning: --baseline ignores generator, embedding and teacher-forcing settings");
    }
    let ds = cfg.data.load()?;
    let prepared = prepare(&cfg, &ds, cfg.seed)?;
    let mut model = build(&cfg, &ds, baseline, &cfg.label_order, cfg.seed)?;
    prepare_out(out, force)?;
    write(out, "config.resolved.json", &cfg.to_json()?)?;
    let ids = |d: &Dataset| d.sequences.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
    let (tr, ho) = (ids(&prepared.train), ids(&prepared.held_out));
    let record = SplitRecord {
        train: tr.iter().map(String::as_str).collect(),
        held_out: ho.iter().map(String::as_str).collect(),
    };
    write(out, "split.json", &(serde_json::to_string_pretty(&record)? + "\n"))?;

    println!(
        "training {} ({} parameters) on {} sequences, validating on {}",
        model.kind(),
        model.num_parameters(),
        prepared.train.sequences.len(),
        prepared.held_out.sequences.len()
    );
    let history = fit(&mut model, &prepared.train, Some(&prepared.held_out), &cfg.train, cfg.seed)?;
    write(out, "history.csv", &history.to_csv())?;
    Checkpoint::capture(&model, prepared.normalizer.as_ref(), Some(window_spec(&cfg))).save(&out.join("checkpoint.json"))?;
    print_final(&history);
    Ok(())
}

fn print_final(history: &TrainHistory) {
    if let Some(last) = history.epochs.last() {
        let mut line = format!("epoch {} loss {:.5}", last.epoch, last.loss);
        for (name, (acc, f1)) in history.label_names.iter().zip(&last.val) {
            write!(line, "  {name}: acc {acc:.4} f1 {f1:.4}").unwrap();
        }
        println!("{line}");
    }
}

fn data_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("data.csv")
    } else {
        path.to_path_buf()
    }
}

/// Restores a checkpoint and loads a dataset normalized the way it was in training.
fn load_for_inference(checkpoint: &Path, data: &Path) -> Result<(Checkpoint, Model, Dataset, WindowSpec), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.restore()?;
    let mut ds = cohar_core::data::load_csv(&data_file(data))?;
    cohar_core::metrics::check_compatible(&model, &ds)?;
    if let Some(n) = &ck.normalizer {
        n.apply(&mut ds)?;
    }
    let window = ck.window.unwrap_or(WindowSpec {
        length: 64,
        stride: 32,
    });
    Ok((ck, model, ds, window))
}

fn predictions_csv(ds: &Dataset, preds: &[Vec<Vec<usize>>], with_truth: bool) -> String {
    let mut out = String::from("seq_id,t");
    for l in &ds.labels {
        if with_truth {
            write!(out, ",{}_truth", l.name).unwrap();
        }
        write!(out, ",{}_pred", l.name).unwrap();
    }
    out.push('\n');
    for (seq, p) in ds.sequences.iter().zip(preds) {
        for t in 0..seq.len() {
            write!(out, "{},{t}", seq.id).unwrap();
            for h in 0..ds.labels.len() {
                if with_truth {
                    write!(out, ",{}", seq.y[h][t]).unwrap();
                }
                write!(out, ",{}", p[h][t]).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

fn safe_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn eval(checkpoint: &Path, data: &Path, out: &Path, force: bool) -> CmdResult {
    let (ck, model, ds, w) = load_for_inference(checkpoint, data)?;
    let (mut report, preds) = evaluate(&model, &ds, w.length, w.stride)?;
    report.config_digest = Some(format!("{:016x}", fnv1a64(serde_json::to_string(&ck.model)?.as_bytes())));
    prepare_out(out, force)?;
    write(out, "metrics.json", &report.to_json()?)?;
    for l in &report.labels {
        write(out, &format!("confusion_{}.csv", safe_name(&l.name)), &l.confusion.to_csv())?;
    }
    write(out, "predictions.csv", &predictions_csv(&ds, &preds, true))?;
    print_report(&report);
    Ok(())
}

fn print_report(report: &MetricsReport) {
    for l in &report.labels {
        println!("{:<12} accuracy {:.4}  macro-F1 {:.4}", l.name, l.accuracy, l.macro_f1);
    }
}

pub fn predict(checkpoint: &Path, data: &Path, out: &Path, force: bool) -> CmdResult {
    let (_, model, ds, w) = load_for_inference(checkpoint, data)?;
    let preds = predict_sequences(&model, &ds, w.length, w.stride)?;
    prepare_out(out, force)?;
    write(out, "predictions.csv", &predictions_csv(&ds, &preds, false))?;
    println!("wrote predictions for {} sequences", ds.sequences.len());
    Ok(())
}

pub fn gradcheck(seed: u64, inject_faulty_op: bool) -> CmdResult {
    let extra = if inject_faulty_op {
        vec![corrupted_case(seed)]
    } else {
        Vec::new()
    };
    let report = gradcheck::run(seed, extra)?;
    print!("{}", report.to_text());
    if report.passed() {
        println!("all {} checks passed", report.results.len());
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(
            report.failures().into_iter().map(str::to_string).collect(),
        ))
    }
}

#[derive(Debug, Serialize)]
struct ModelSummary {
    model: String,
    /// `[label, mean accuracy, mean macro-F1]` per label.
    means: Vec<LabelMeans>,
}

#[derive(Debug, Serialize)]
struct LabelMeans {
    label: String,
    accuracy: f64,
    macro_f1: f64,
}

#[derive(Debug, Serialize)]
struct Delta {
    label: String,
    per_seed: Vec<f64>,
    mean: f64,
    positive_seeds: usize,
}

#[derive(Debug, Serialize)]
struct CompareSummary {
    seeds: Vec<u64>,
    strong_label: String,
    weak_label: String,
    chain_model: String,
    baseline_model: String,
    models: Vec<ModelSummary>,
    /// Chain (strong → weak) minus baseline, macro-F1 on the weak label.
    weak_f1_delta: Delta,
    /// Same on the strong label.
    strong_f1_delta: Delta,
}

fn chain_name(order: &[String]) -> String {
    format!("chain_{}", order.join("_to_"))
}

pub fn compare(config: &Path, seeds: u64, out: &Path, force: bool) -> CmdResult {
    let cfg = ExperimentConfig::from_file(config)?;
    if seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()).into());
    }
    prepare_out(out, force)?;
    write(out, "config.resolved.json", &cfg.to_json()?)?;

    // first model order: configured (or dataset) order; second: reversed
    let probe = match &cfg.data {
        DataSource::Synth(s) => SynthConfig {
            num_sequences: 1,
            ..s.clone()
        }
        .labels(),
        DataSource::Csv(_) => cfg.data.load()?.labels,
    };
    let order_a: Vec<String> = if cfg.label_order.is_empty() {
        probe.iter().map(|l| l.name.clone()).collect()
    } else {
        cfg.label_order.clone()
    };
    let order_b: Vec<String> = order_a.iter().rev().cloned().collect();
    let models: Vec<(String, bool, Vec<String>)> = vec![
        ("baseline".to_string(), true, order_a.clone()),
        (chain_name(&order_a), false, order_a.clone()),
        (chain_name(&order_b), false, order_b.clone()),
    ];
    let label_names: Vec<String> = probe.iter().map(|l| l.name.clone()).collect();

    let seed_list: Vec<u64> = (0..seeds).map(|k| cfg.seed + k).collect();
    // scores[model][label][seed] = (accuracy, macro_f1)
    let mut scores = vec![vec![Vec::new(); label_names.len()]; models.len()];
    let mut csv = String::from("seed,model,label,metric,value\n");
    for &seed in &seed_list {
        let ds = match &cfg.data {
            DataSource::Synth(s) => cohar_core::data::generate_synthetic(&SynthConfig {
                seed: derive_seed(seed, "synth"),
                ..s.clone()
            })?,
            DataSource::Csv(_) => cfg.data.load()?,
        };
        let prepared = prepare(&cfg, &ds, seed)?;
        for (mi, (name, baseline, order)) in models.iter().enumerate() {
            let mut model = build(&cfg, &ds, *baseline, order, seed)?;
            let history = fit(&mut model, &prepared.train, None, &cfg.train, seed)?;
            let (report, _) = evaluate(&model, &prepared.held_out, cfg.train.window, cfg.train.stride)?;
            let mut line = format!(
                "seed {seed} {name:<28} loss {:.4}",
                history.final_loss().unwrap_or(f64::NAN)
            );
            for (li, l) in report.labels.iter().enumerate() {
                scores[mi][li].push((l.accuracy, l.macro_f1));
                writeln!(csv, "{seed},{name},{},accuracy,{}", l.name, l.accuracy).unwrap();
                writeln!(csv, "{seed},{name},{},macro_f1,{}", l.name, l.macro_f1).unwrap();
                write!(line, "  {}: acc {:.4} f1 {:.4}", l.name, l.accuracy, l.macro_f1).unwrap();
            }
            println!("{line}");
        }
    }
    write(out, "comparison.csv", &csv)?;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let label_index = |n: &str| label_names.iter().position(|l| l == n).expect("known label");
    let delta = |label: &str| {
        let li = label_index(label);
        let per_seed: Vec<f64> = scores[1][li]
            .iter()
            .zip(&scores[0][li])
            .map(|(c, b)| c.1 - b.1)
            .collect();
        Delta {
            label: label.to_string(),
            mean: mean(&per_seed),
            positive_seeds: per_seed.iter().filter(|d| **d > 0.0).count(),
            per_seed,
        }
    };
    let (strong, weak) = (order_a[0].clone(), order_a[order_a.len() - 1].clone());
    let summary = CompareSummary {
        seeds: seed_list,
        chain_model: models[1].0.clone(),
        baseline_model: models[0].0.clone(),
        models: models
            .iter()
            .zip(&scores)
            .map(|((name, _, _), per_label)| ModelSummary {
                model: name.clone(),
                means: label_names
                    .iter()
                    .zip(per_label)
                    .map(|(l, s)| LabelMeans {
                        label: l.clone(),
                        accuracy: mean(&s.iter().map(|x| x.0).collect::<Vec<_>>()),
                        macro_f1: mean(&s.iter().map(|x| x.1).collect::<Vec<_>>()),
                    })
                    .collect(),
            })
            .collect(),
        weak_f1_delta: delta(&weak),
        strong_f1_delta: delta(&strong),
        strong_label: strong,
        weak_label: weak,
    };
    write(out, "summary.json", &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    println!(
        "{} vs baseline, {} macro-F1: mean delta {:+.4} (positive on {}/{} seeds); {} delta {:+.4}",
        summary.chain_model,
        summary.weak_label,
        summary.weak_f1_delta.mean,
        summary.weak_f1_delta.positive_seeds,
        summary.seeds.len(),
        summary.strong_label,
        summary.strong_f1_delta.mean
    );
    Ok(())
}
