use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hkd_core::data::{load_dataset, Dataset};
use hkd_core::distill::checkpoint::{hash_json, load_distill, load_network, save_json, FORMAT_VERSION};
use hkd_core::distill::{pretrain_teacher, DistillCheckpoint, EpochMetrics, NetworkCheckpoint, Trainer};
use hkd_core::Error;
use log::{info, warn};
use serde::Serialize;

use crate::config::{resolve, ExperimentConfig};
use crate::run::{
    epoch_checkpoint, output_dir, ExperimentManifest, JsonLines, CHECKPOINTS, METRICS, STEPS, STUDENT_FILE, TEACHER_FILE,
};
use crate::{CheckpointArgs, RunArgs};

pub struct Teacher {
    pub checkpoint: NetworkCheckpoint,
    pub hash: String,
}

/// Accepts a checkpoint file or a `pretrain-teacher` run directory.
pub fn load_teacher(path: &Path) -> Result<Teacher> {
    let file = if path.is_dir() {
        path.join(CHECKPOINTS).join(TEACHER_FILE)
    } else {
        path.to_path_buf()
    };
    let checkpoint = load_network(&file)?;
    let hash = hash_json(&checkpoint.network)?;
    Ok(Teacher { checkpoint, hash })
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let data = load_dataset(&cfg.dataset).context("loading dataset")?;
    info!(
        "dataset {:?}: {} train / {} test images, {} classes",
        cfg.dataset.name,
        data.train.len(),
        data.test.len(),
        data.train.num_classes
    );
    Ok(data)
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub config_hash: String,
    pub epochs: usize,
    pub test_acc: f64,
}

fn print_summary(s: &RunSummary) -> Result<()> {
    println!("{}", serde_json::to_string(s)?);
    Ok(())
}

fn log_epoch(what: &str, total: usize, m: &EpochMetrics) {
    info!(
        "{what} epoch {}/{total}: ce {:.4} kd {:.4} hol {:.4} lr {:.4} train {:.2}% test {:.2}%",
        m.epoch + 1,
        m.ce,
        m.kd,
        m.hol,
        m.lr,
        m.train_acc,
        m.test_acc
    );
}

pub fn pretrain(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args.config.as_ref(), &args.overrides)?;
    let data = load_data(&cfg)?;
    let dir = output_dir(args.out.as_deref(), "pretrain-teacher")?;
    let manifest = ExperimentManifest::new("pretrain-teacher", &cfg.distill, &cfg.dataset, None, &dir)?;
    manifest.save()?;
    let mut metrics = JsonLines::create(dir.join(METRICS))?;
    let ck_path = dir.join(CHECKPOINTS).join(TEACHER_FILE);
    let total = cfg.distill.teacher_schedule.epochs;
    let (_, log) = pretrain_teacher(&cfg.distill, &data, &mut |net, m| {
        log_epoch("teacher", total, m);
        metrics.write(m).map_err(|e| Error::Data(format!("{e:#}")))?;
        save_json(
            &ck_path,
            &NetworkCheckpoint {
                format_version: FORMAT_VERSION,
                config_hash: manifest.config_hash.clone(),
                network: net.clone(),
                stats: data.stats.clone(),
                epochs: m.epoch + 1,
                test_acc: m.test_acc,
            },
        )
    })?;
    let last = log.last().expect("at least one epoch");
    print_summary(&RunSummary {
        output_dir: dir,
        config_hash: manifest.config_hash,
        epochs: log.len(),
        test_acc: last.test_acc,
    })
}

fn prune_checkpoints(dir: &Path, keep: usize) -> Result<()> {
    if keep == 0 {
        return Ok(());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir.join(CHECKPOINTS))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("epoch-")))
        .collect();
    files.sort();
    let excess = files.len().saturating_sub(keep);
    for f in &files[..excess] {
        fs::remove_file(f).with_context(|| format!("removing {}", f.display()))?;
    }
    Ok(())
}

/// Runs (or resumes) one distillation into `dir` and returns its summary.
pub fn run_distill(
    cfg: &ExperimentConfig,
    data: &Dataset,
    teacher: &Teacher,
    dir: &Path,
    resume: Option<DistillCheckpoint>,
    ck: &CheckpointArgs,
) -> Result<RunSummary> {
    if teacher.checkpoint.stats != data.stats {
        return Err(Error::Config(
            "the teacher was trained with different input normalization; use the dataset settings it was pretrained on".into(),
        )
        .into());
    }
    let manifest = ExperimentManifest::new("distill", &cfg.distill, &cfg.dataset, Some(teacher.hash.clone()), dir)?;
    let trainer = Trainer::new(&cfg.distill, data, &teacher.checkpoint.network)?;
    let (mut state, mut metrics, mut steps) = match resume {
        Some(r) => {
            if r.config_hash != manifest.config_hash {
                return Err(Error::Config(format!(
                    "checkpoint was written under config hash {}, the resolved config hashes to {}",
                    r.config_hash, manifest.config_hash
                ))
                .into());
            }
            info!("resuming after epoch {} (step {})", r.state.epoch, r.state.step);
            let metrics = JsonLines::truncated(dir.join(METRICS), r.state.epoch)?;
            let steps = JsonLines::truncated(dir.join(STEPS), r.state.step)?;
            (r.state, metrics, steps)
        }
        None => (
            trainer.init_state()?,
            JsonLines::create(dir.join(METRICS))?,
            JsonLines::create(dir.join(STEPS))?,
        ),
    };
    manifest.save()?;
    let total = cfg.distill.schedule.epochs;
    let every = ck.checkpoint_every.max(1);
    let mut last = None;
    let mut step_error = None;
    let result = trainer.train(
        &mut state,
        &mut |m| {
            if let Err(e) = steps.write(m) {
                step_error.get_or_insert(e);
            }
        },
        &mut |s, m| {
            log_epoch("distill", total, m);
            metrics.write(m).map_err(|e| Error::Data(format!("{e:#}")))?;
            if s.epoch % every == 0 || s.epoch == total {
                let ck_file = DistillCheckpoint {
                    format_version: FORMAT_VERSION,
                    config_hash: manifest.config_hash.clone(),
                    teacher_hash: teacher.hash.clone(),
                    state: s.clone(),
                };
                save_json(&epoch_checkpoint(dir, s.epoch), &ck_file)?;
                prune_checkpoints(dir, ck.keep_checkpoints).map_err(|e| Error::Data(format!("{e:#}")))?;
            }
            last = Some(m.clone());
            Ok(())
        },
    );
    if let Some(e) = step_error {
        return Err(e);
    }
    result?;
    let test_acc = match last {
        Some(m) => m.test_acc,
        None => {
            warn!("nothing left to train; evaluating the checkpointed student");
            hkd_core::distill::evaluate(&state.student, &data.test.images, &data.test.labels)?
        }
    };
    save_json(
        &dir.join(STUDENT_FILE),
        &NetworkCheckpoint {
            format_version: FORMAT_VERSION,
            config_hash: manifest.config_hash.clone(),
            network: state.student.clone(),
            stats: data.stats.clone(),
            epochs: state.epoch,
            test_acc,
        },
    )?;
    Ok(RunSummary {
        output_dir: dir.to_path_buf(),
        config_hash: manifest.config_hash,
        epochs: state.epoch,
        test_acc,
    })
}

pub fn distill(teacher_path: &Path, resume: Option<&Path>, args: &RunArgs, ck: &CheckpointArgs) -> Result<()> {
    let teacher = load_teacher(teacher_path)?;
    let (cfg, dir, resumed) = match resume {
        Some(path) => {
            let checkpoint = load_distill(path)?;
            let run_dir = path
                .parent()
                .and_then(Path::parent)
                .map(Path::to_path_buf)
                .ok_or_else(|| Error::Config(format!("{} is not inside a run's checkpoints directory", path.display())))?;
            let cfg = match &args.config {
                Some(_) => resolve(args.config.as_ref(), &args.overrides)?,
                None => {
                    let m = ExperimentManifest::load(&run_dir)?;
                    let mut cfg = ExperimentConfig {
                        dataset: m.dataset,
                        distill: m.config,
                    };
                    args.overrides.apply(&mut cfg);
                    cfg.distill.validate(None)?;
                    cfg
                }
            };
            let dir = match &args.out {
                Some(out) => output_dir(Some(out), "distill")?,
                None => run_dir,
            };
            (cfg, dir, Some(checkpoint))
        }
        None => {
            let cfg = resolve(args.config.as_ref(), &args.overrides)?;
            (cfg, output_dir(args.out.as_deref(), "distill")?, None)
        }
    };
    let data = load_data(&cfg)?;
    let summary = run_distill(&cfg, &data, &teacher, &dir, resumed, ck)?;
    print_summary(&summary)
}
