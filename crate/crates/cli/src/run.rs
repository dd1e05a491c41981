use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hkd_core::data::DatasetSpec;
use hkd_core::distill::checkpoint::{hash_json, load_json, save_json};
use hkd_core::distill::DistillConfig;
use hkd_core::Error;
use log::info;
use serde::{Deserialize, Serialize};

pub const OUTPUT_ROOT_ENV: &str = "HKD_OUTPUT_ROOT";
pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.jsonl";
pub const STEPS: &str = "steps.jsonl";
pub const CHECKPOINTS: &str = "checkpoints";
pub const TEACHER_FILE: &str = "teacher.json";
pub const STUDENT_FILE: &str = "student.json";

/// Self-description of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub config: DistillConfig,
    pub dataset: DatasetSpec,
    /// Hash of the teacher network this run distilled from, if any.
    pub teacher_hash: Option<String>,
    pub output_dir: PathBuf,
    pub config_hash: String,
    pub tool_version: String,
}

#[derive(Serialize)]
struct HashedPart<'a> {
    command: &'a str,
    config: &'a DistillConfig,
    dataset: &'a DatasetSpec,
    teacher_hash: &'a Option<String>,
}

impl ExperimentManifest {
    pub fn new(command: &str, config: &DistillConfig, dataset: &DatasetSpec, teacher_hash: Option<String>, output_dir: &Path) -> Result<Self> {
        let config_hash = hash_json(&HashedPart {
            command,
            config,
            dataset,
            teacher_hash: &teacher_hash,
        })?;
        Ok(Self {
            command: command.to_string(),
            config: config.clone(),
            dataset: dataset.clone(),
            teacher_hash,
            output_dir: output_dir.to_path_buf(),
            config_hash,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::Config(format!("{} is not a run directory (no {MANIFEST})", run_dir.display())).into());
        }
        Ok(load_json(&path)?)
    }

    pub fn save(&self) -> Result<()> {
        Ok(save_json(&self.output_dir.join(MANIFEST), self)?)
    }
}

/// `--out` if given, otherwise a fresh timestamped directory under the
/// output root.
pub fn output_dir(explicit: Option<&Path>, command: &str) -> Result<PathBuf> {
    let dir = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            let base = root.join(format!("{command}-{stamp}"));
            let mut dir = base.clone();
            let mut n = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{n}", base.display()));
                n += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    info!("writing outputs to {}", dir.display());
    Ok(dir)
}

/// One JSON object per line.
pub struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    /// Opens for appending, keeping only the first `keep` lines already present.
    pub fn truncated(path: PathBuf, keep: usize) -> Result<Self> {
        let kept: Vec<String> = match fs::read_to_string(&path) {
            Ok(text) => text.lines().take(keep).map(str::to_string).collect(),
            Err(_) => Vec::new(),
        };
        let mut me = Self::create(path)?;
        for line in kept {
            writeln!(me.out, "{line}")?;
        }
        Ok(me)
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        writeln!(self.out).with_context(|| format!("writing {}", self.path.display()))?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l).map_err(Error::from)?))
        .collect()
}

pub fn epoch_checkpoint(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(CHECKPOINTS).join(format!("epoch-{epoch:03}.json"))
}
