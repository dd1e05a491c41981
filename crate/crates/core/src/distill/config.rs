use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphMode;
use crate::models::arch_spec;

/// How holistic embeddings are produced from the attributed graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Gnn,
    Sum,
    Mean,
}

/// Objective aligning teacher and student holistic embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    InfonceBank,
    InfonceBatch,
    Mse,
    Jsd,
    GraphBank,
}

macro_rules! string_enum {
    ($ty:ty, $what:literal, $($name:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", $what, " '{}' (expected one of: {})"),
                        other,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

string_enum!(EncoderMode, "encoder mode", "gnn" => EncoderMode::Gnn, "sum" => EncoderMode::Sum, "mean" => EncoderMode::Mean);
string_enum!(
    Objective,
    "objective",
    "infonce_bank" => Objective::InfonceBank,
    "infonce_batch" => Objective::InfonceBatch,
    "mse" => Objective::Mse,
    "jsd" => Objective::Jsd,
    "graph_bank" => Objective::GraphBank,
);

impl fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderMode::Gnn => "gnn",
            EncoderMode::Sum => "sum",
            EncoderMode::Mean => "mean",
        })
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::InfonceBank => "infonce_bank",
            Objective::InfonceBatch => "infonce_batch",
            Objective::Mse => "mse",
            Objective::Jsd => "jsd",
            Objective::GraphBank => "graph_bank",
        })
    }
}

impl Objective {
    pub fn uses_banks(self) -> bool {
        matches!(self, Objective::InfonceBank | Objective::GraphBank)
    }
}

/// Learning-rate schedule: step decay at fixed epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    /// `None` picks the architecture's base rate.
    pub lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// `None` scales the reference milestones 150/180/210 of 240 to `epochs`.
    pub decay_epochs: Option<Vec<usize>>,
    pub decay_factor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr: None,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            decay_epochs: None,
            decay_factor: 0.1,
        }
    }
}

impl Schedule {
    pub fn milestones(&self) -> Vec<usize> {
        match &self.decay_epochs {
            Some(v) => v.clone(),
            None => [150.0, 180.0, 210.0]
                .iter()
                .map(|e| (e * self.epochs as f64 / 240.0).round() as usize)
                .collect(),
        }
    }

    pub fn base_lr(&self, arch: &str) -> Result<f64> {
        Ok(match self.lr {
            Some(lr) => lr,
            None => arch_spec(arch)?.base_lr,
        })
    }

    /// Rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        let passed = self.milestones().iter().filter(|&&m| epoch >= m).count();
        base * self.decay_factor.powi(passed as i32)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{what}.lr must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("{what}.momentum must lie in [0, 1)")));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!("{what}.weight_decay must be non-negative")));
        }
        if self.epochs == 0 {
            return Err(Error::Config(format!("{what}.epochs must be positive")));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("{what}.decay_factor must lie in (0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub teacher_arch: String,
    pub student_arch: String,
    /// KNN neighbors per node.
    pub k: usize,
    /// Graph-convolution hops `L`.
    pub hops: usize,
    /// Holistic embedding width `g`.
    pub embed_dim: usize,
    pub beta: f64,
    pub lambda: f64,
    pub tau_kd: f64,
    pub tau_c: f64,
    /// Memory-bank momentum `m`.
    pub bank_momentum: f64,
    /// `None` uses `min(4096, N − 1)`.
    pub n_negatives: Option<usize>,
    pub batch_size: usize,
    pub graph_mode: GraphMode,
    pub encoder_mode: EncoderMode,
    pub objective: Objective,
    pub seed: u64,
    pub schedule: Schedule,
    /// Schedule for teacher pretraining.
    pub teacher_schedule: Schedule,
    pub teacher_seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            teacher_arch: "small-convnet-T".into(),
            student_arch: "small-convnet-S".into(),
            k: 8,
            hops: 1,
            embed_dim: 128,
            beta: 1.0,
            lambda: 1.0,
            tau_kd: 4.0,
            tau_c: 0.1,
            bank_momentum: 0.5,
            n_negatives: None,
            batch_size: 64,
            graph_mode: GraphMode::Knn,
            encoder_mode: EncoderMode::Gnn,
            objective: Objective::InfonceBank,
            seed: 0,
            schedule: Schedule::default(),
            teacher_schedule: Schedule::default(),
            teacher_seed: 0,
        }
    }
}

impl DistillConfig {
    /// Field-level checks; `train_len` (if known) bounds the negative count.
    pub fn validate(&self, train_len: Option<usize>) -> Result<()> {
        arch_spec(&self.teacher_arch)?;
        arch_spec(&self.student_arch)?;
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.batch_size < 2 {
            return bad("batch_size", format!("must be at least 2, got {}", self.batch_size));
        }
        if self.graph_mode != GraphMode::FullyConnected && (self.k == 0 || self.k >= self.batch_size) {
            return bad("k", format!("need 1 <= k < batch_size ({}), got {}", self.batch_size, self.k));
        }
        if self.embed_dim == 0 {
            return bad("embed_dim", "must be positive".into());
        }
        for (name, v) in [("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, format!("must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in [("tau_kd", self.tau_kd), ("tau_c", self.tau_c)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, format!("must be positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.bank_momentum) {
            return bad("bank_momentum", format!("must lie in [0, 1], got {}", self.bank_momentum));
        }
        if let (Some(n), Some(len)) = (self.n_negatives, train_len) {
            if n == 0 || n >= len {
                return bad("n_negatives", format!("need 1 <= n < {len}, got {n}"));
            }
        }
        if let Some(len) = train_len {
            if len < self.batch_size {
                return bad("batch_size", format!("{} exceeds the training set ({len})", self.batch_size));
            }
        }
        self.schedule.validate("schedule")?;
        self.teacher_schedule.validate("teacher_schedule")?;
        Ok(())
    }

    pub fn negatives_for(&self, train_len: usize) -> usize {
        self.n_negatives.unwrap_or(4096.min(train_len.saturating_sub(1)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn milestones_scale_to_epoch_budget() {
        let s = Schedule {
            epochs: 240,
            ..Schedule::default()
        };
        assert_eq!(s.milestones(), vec![150, 180, 210]);
        let s = Schedule::default();
        assert_eq!(s.milestones(), vec![19, 23, 26]);
        assert_eq!(s.lr_at(0.05, 18), 0.05);
        assert!((s.lr_at(0.05, 19) - 0.005).abs() < 1e-15);
        assert!((s.lr_at(0.05, 29) - 0.05 * 1e-3).abs() < 1e-15);
    }

    #[test]
    fn light_architectures_default_to_lower_rate() {
        let s = Schedule::default();
        assert_eq!(s.base_lr("mobilenet-v2-like").unwrap(), 0.01);
        assert_eq!(s.base_lr("resnet-8x4-like").unwrap(), 0.05);
    }

    #[test]
    fn validation_names_fields() {
        let ok = DistillConfig::default();
        ok.validate(Some(1000)).unwrap();
        let cases = [
            DistillConfig { k: 64, ..ok.clone() },
            DistillConfig { beta: -1.0, ..ok.clone() },
            DistillConfig { tau_c: 0.0, ..ok.clone() },
            DistillConfig { bank_momentum: 1.5, ..ok.clone() },
            DistillConfig { n_negatives: Some(1000), ..ok.clone() },
            DistillConfig { student_arch: "nope".into(), ..ok.clone() },
        ];
        for c in cases {
            assert!(matches!(c.validate(Some(1000)), Err(Error::Config(_))));
        }
        assert!(DistillConfig { k: 64, ..ok }.validate(Some(1000)).unwrap_err().to_string().contains("k:"));
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let c: DistillConfig = toml::from_str("beta = 0.5\nobjective = \"jsd\"\ngraph_mode = \"fc\"\n[schedule]\nepochs = 5\n").unwrap();
        assert_eq!(c.beta, 0.5);
        assert_eq!(c.objective, Objective::Jsd);
        assert_eq!(c.graph_mode, GraphMode::FullyConnected);
        assert_eq!(c.schedule.epochs, 5);
        assert_eq!(c.k, 8);
        let back: DistillConfig = toml::from_str(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!("graph_bank".parse::<Objective>().is_ok());
        assert!("nope".parse::<EncoderMode>().is_err());
    }
}
