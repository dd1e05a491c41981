use std::fmt::Display;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use hkd_core::data::DatasetSpec;
use hkd_core::distill::{DistillConfig, EncoderMode, Objective};
use hkd_core::{Error, GraphMode};
use log::info;
use serde::{Deserialize, Serialize};

/// Everything a config file can set. Both tables are optional; missing
/// fields take the built-in defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub distill: DistillConfig,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }
}

/// Command-line overrides. A flag always wins over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub teacher_arch: Option<String>,
    #[arg(long)]
    pub student_arch: Option<String>,
    /// KNN neighbors per node.
    #[arg(long)]
    pub k: Option<usize>,
    /// Graph-convolution hops.
    #[arg(long)]
    pub hops: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau_kd: Option<f64>,
    #[arg(long)]
    pub tau_c: Option<f64>,
    #[arg(long)]
    pub bank_momentum: Option<f64>,
    #[arg(long)]
    pub n_negatives: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Distillation epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Base learning rate for the student and encoders.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub graph_mode: Option<GraphMode>,
    #[arg(long)]
    pub encoder_mode: Option<EncoderMode>,
    #[arg(long)]
    pub objective: Option<Objective>,
    /// Master seed for the distillation run.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub teacher_epochs: Option<usize>,
    #[arg(long)]
    pub teacher_seed: Option<u64>,
    /// Seed of the dataset generator / split.
    #[arg(long)]
    pub data_seed: Option<u64>,
}

fn set<T: PartialEq + Display>(field: &str, slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        if *slot != v {
            info!("--{} {v} overrides config value {}", field.replace('_', "-"), *slot);
        }
        *slot = v;
    }
}

fn set_opt<T: PartialEq + Display + Copy>(field: &str, slot: &mut Option<T>, flag: Option<T>) {
    if let Some(v) = flag {
        if let Some(old) = *slot {
            if old != v {
                info!("--{} {v} overrides config value {old}", field.replace('_', "-"));
            }
        }
        *slot = Some(v);
    }
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        let d = &mut cfg.distill;
        set("teacher_arch", &mut d.teacher_arch, self.teacher_arch.clone());
        set("student_arch", &mut d.student_arch, self.student_arch.clone());
        set("k", &mut d.k, self.k);
        set("hops", &mut d.hops, self.hops);
        set("embed_dim", &mut d.embed_dim, self.embed_dim);
        set("beta", &mut d.beta, self.beta);
        set("lambda", &mut d.lambda, self.lambda);
        set("tau_kd", &mut d.tau_kd, self.tau_kd);
        set("tau_c", &mut d.tau_c, self.tau_c);
        set("bank_momentum", &mut d.bank_momentum, self.bank_momentum);
        set_opt("n_negatives", &mut d.n_negatives, self.n_negatives);
        set("batch_size", &mut d.batch_size, self.batch_size);
        set("epochs", &mut d.schedule.epochs, self.epochs);
        set_opt("lr", &mut d.schedule.lr, self.lr);
        set("graph_mode", &mut d.graph_mode, self.graph_mode);
        set("encoder_mode", &mut d.encoder_mode, self.encoder_mode);
        set("objective", &mut d.objective, self.objective);
        set("seed", &mut d.seed, self.seed);
        set("teacher_epochs", &mut d.teacher_schedule.epochs, self.teacher_epochs);
        set("teacher_seed", &mut d.teacher_seed, self.teacher_seed);
        set("data_seed", &mut cfg.dataset.seed, self.data_seed);
    }
}

/// Loads the config file (if any), applies flag overrides and validates.
pub fn resolve(path: Option<&PathBuf>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path.map(PathBuf::as_path))?;
    overrides.apply(&mut cfg);
    cfg.distill.validate(None).context("invalid configuration")?;
    Ok(cfg)
}

/// Sets one named distillation field from its textual value, as used by
/// `sweep`.
pub fn set_param(cfg: &mut DistillConfig, name: &str, value: &str) -> Result<()> {
    let bad = |e: &dyn Display| Error::Config(format!("--param {name}: cannot use '{value}': {e}"));
    macro_rules! parse {
        () => {
            value.parse().map_err(|e| bad(&e))?
        };
    }
    match name {
        "k" => cfg.k = parse!(),
        "hops" => cfg.hops = parse!(),
        "embed_dim" => cfg.embed_dim = parse!(),
        "beta" => cfg.beta = parse!(),
        "lambda" => cfg.lambda = parse!(),
        "tau_kd" => cfg.tau_kd = parse!(),
        "tau_c" => cfg.tau_c = parse!(),
        "bank_momentum" => cfg.bank_momentum = parse!(),
        "n_negatives" => cfg.n_negatives = Some(parse!()),
        "batch_size" => cfg.batch_size = parse!(),
        "seed" => cfg.seed = parse!(),
        "lr" => cfg.schedule.lr = Some(parse!()),
        "epochs" => cfg.schedule.epochs = parse!(),
        "graph_mode" => cfg.graph_mode = parse!(),
        "encoder_mode" => cfg.encoder_mode = parse!(),
        "objective" => cfg.objective = parse!(),
        other => {
            return Err(Error::Config(format!(
                "--param {other} is not sweepable (try k, beta, lambda, hops, embed_dim, tau_c, tau_kd, bank_momentum, n_negatives, batch_size, lr, epochs, graph_mode, encoder_mode, objective, seed)"
            ))
            .into())
        }
    }
    Ok(())
}
