//! Repeated distillation runs: ablation variants and one-parameter sweeps.

use std::fs::File;
use std::path::Path;

use anyhow::{Context, Result};
use hkd_core::distill::EncoderMode;
use hkd_core::{Error, GraphMode};
use log::info;
use serde::Serialize;

use crate::config::{resolve, set_param, ExperimentConfig};
use crate::plot::save_line_chart;
use crate::run::output_dir;
use crate::train::{load_data, load_teacher, run_distill, Teacher};
use crate::{CheckpointArgs, RunArgs};

pub const DEFAULT_VARIANTS: [&str; 5] = ["knn/gnn", "random/gnn", "fc/gnn", "knn/sum", "knn/mean"];

pub fn parse_variant(v: &str) -> Result<(GraphMode, EncoderMode)> {
    let (g, e) = v
        .split_once('/')
        .ok_or_else(|| Error::Config(format!("variant '{v}' is not of the form graph/encoder, e.g. knn/gnn")))?;
    Ok((g.parse()?, e.parse()?))
}

#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub name: String,
    pub seed: u64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Sample standard deviation (0 for a single run).
pub fn summarize(name: &str, accs: &[f64]) -> Summary {
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let std = if accs.len() > 1 {
        (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Summary {
        name: name.to_string(),
        mean,
        std,
        runs: accs.len(),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Only the last epoch checkpoint is worth keeping for grid runs.
fn grid_checkpoints(cfg: &ExperimentConfig) -> CheckpointArgs {
    CheckpointArgs {
        checkpoint_every: cfg.distill.schedule.epochs.max(1),
        keep_checkpoints: 1,
    }
}

fn setup(teacher: &Path, run: &RunArgs, command: &str) -> Result<(ExperimentConfig, hkd_core::Dataset, Teacher, std::path::PathBuf)> {
    let cfg = resolve(run.config.as_ref(), &run.overrides)?;
    let teacher = load_teacher(teacher)?;
    let data = load_data(&cfg)?;
    let root = output_dir(run.out.as_deref(), command)?;
    Ok((cfg, data, teacher, root))
}

fn print_summaries(summaries: &[Summary]) {
    for s in summaries {
        println!("{:<16} {:>7.2} ± {:<5.2} ({} runs)", s.name, s.mean, s.std, s.runs);
    }
}

pub fn ablate(teacher: &Path, seeds: &[u64], variants: &[String], run: &RunArgs) -> Result<()> {
    let parsed = variants.iter().map(|v| parse_variant(v)).collect::<Result<Vec<_>>>()?;
    let (cfg, data, teacher, root) = setup(teacher, run, "ablate")?;
    let ck = grid_checkpoints(&cfg);
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (name, (graph, encoder)) in variants.iter().zip(parsed) {
        let mut accs = Vec::new();
        for &seed in seeds {
            let mut c = cfg.clone();
            c.distill.graph_mode = graph;
            c.distill.encoder_mode = encoder;
            c.distill.seed = seed;
            c.distill.validate(Some(data.train.len()))?;
            let dir = root.join(format!("{graph}-{encoder}")).join(format!("seed-{seed}"));
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            info!("ablation {name} seed {seed}");
            let s = run_distill(&c, &data, &teacher, &dir, None, &ck)?;
            accs.push(s.test_acc);
            rows.push(Row {
                name: name.clone(),
                seed,
                test_acc: s.test_acc,
            });
        }
        summaries.push(summarize(name, &accs));
    }
    write_csv(&root.join("ablation.csv"), &rows)?;
    write_csv(&root.join("summary.csv"), &summaries)?;
    print_summaries(&summaries);
    let mean = |n: &str| summaries.iter().find(|s| s.name == n).map(|s| s.mean);
    if let (Some(a), Some(b)) = (mean("knn/gnn"), mean("random/gnn")) {
        println!("knn graph vs random graph: {:+.2}", a - b);
    }
    if let (Some(a), Some(b)) = (mean("knn/gnn"), mean("knn/mean")) {
        println!("gnn encoder vs mean pooling: {:+.2}", a - b);
    }
    println!("results in {}", root.display());
    Ok(())
}

pub fn sweep(teacher: &Path, param: &str, values: &[String], seeds: &[u64], run: &RunArgs) -> Result<()> {
    // fail on a bad name or value before any training happens
    for v in values {
        set_param(&mut Default::default(), param, v)?;
    }
    let (cfg, data, teacher, root) = setup(teacher, run, "sweep")?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for value in values {
        let mut accs = Vec::new();
        for &seed in seeds {
            let mut c = cfg.clone();
            set_param(&mut c.distill, param, value)?;
            c.distill.seed = seed;
            c.distill.validate(Some(data.train.len()))?;
            let dir = root.join(format!("{param}-{value}")).join(format!("seed-{seed}"));
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            info!("sweep {param}={value} seed {seed}");
            let s = run_distill(&c, &data, &teacher, &dir, None, &grid_checkpoints(&c))?;
            accs.push(s.test_acc);
            rows.push(Row {
                name: value.clone(),
                seed,
                test_acc: s.test_acc,
            });
        }
        summaries.push(summarize(value, &accs));
    }
    write_csv(&root.join("runs.csv"), &rows)?;
    write_csv(&root.join("summary.csv"), &summaries)?;
    // numeric values are plotted at their value, anything else by position
    let xs: Vec<f64> = match values.iter().map(|v| v.parse::<f64>()).collect::<Result<Vec<_>, _>>() {
        Ok(xs) => xs,
        Err(_) => (0..values.len()).map(|i| i as f64).collect(),
    };
    let ys: Vec<f64> = summaries.iter().map(|s| s.mean).collect();
    let err: Vec<f64> = summaries.iter().map(|s| s.std).collect();
    save_line_chart(&xs, &ys, &err, &root.join("summary.png"))?;
    print_summaries(&summaries);
    println!("results in {}", root.display());
    Ok(())
}
