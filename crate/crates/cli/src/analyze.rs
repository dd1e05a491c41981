use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hkd_core::data::{load_dataset, make_transfer_split};
use hkd_core::distill::checkpoint::{load_network, save_json};
use hkd_core::distill::{evaluate as test_accuracy, EpochMetrics, NetworkCheckpoint};
use hkd_core::eval::{linear_probe, prediction_heatmap, save_heatmap_png, write_ari_csv, write_matrix_csv, AccuracyTable, ProbeOptions, ProbeReport};
use hkd_core::linalg::frobenius_distance;
use hkd_core::models::ARCHS;
use hkd_core::{build_backbone, DatasetSpec, Error};
use log::info;
use ndarray::s;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::run::{output_dir, read_json_lines, ExperimentManifest, CHECKPOINTS, METRICS, STUDENT_FILE, TEACHER_FILE};
use crate::train::load_data;

/// The final network of a run: the student for distill runs, the teacher
/// for pretrain runs.
pub fn run_network(run_dir: &Path) -> Result<(NetworkCheckpoint, &'static str)> {
    let student = run_dir.join(STUDENT_FILE);
    if student.exists() {
        return Ok((load_network(&student)?, "student"));
    }
    let teacher = run_dir.join(CHECKPOINTS).join(TEACHER_FILE);
    if teacher.exists() {
        return Ok((load_network(&teacher)?, "teacher"));
    }
    Err(Error::Config(format!("{} holds no trained network", run_dir.display())).into())
}

fn manifest_config(run_dir: &Path) -> Result<ExperimentConfig> {
    let m = ExperimentManifest::load(run_dir)?;
    Ok(ExperimentConfig {
        dataset: m.dataset,
        distill: m.config,
    })
}

#[derive(Serialize)]
struct Evaluation {
    run_dir: PathBuf,
    network: &'static str,
    test_acc: f64,
    logged_test_acc: Option<f64>,
    reproduced: bool,
}

pub fn evaluate(run_dir: &Path) -> Result<()> {
    let cfg = manifest_config(run_dir)?;
    let (ck, which) = run_network(run_dir)?;
    let data = load_data(&cfg)?;
    if ck.stats != data.stats {
        return Err(Error::Data("rebuilt dataset normalization differs from the checkpoint's".into()).into());
    }
    let acc = test_accuracy(&ck.network, &data.test.images, &data.test.labels)?;
    let logged = read_json_lines::<EpochMetrics>(&run_dir.join(METRICS))
        .ok()
        .and_then(|l| l.last().map(|m| m.test_acc));
    let reproduced = logged.is_none_or(|l| l == acc);
    println!(
        "{}",
        serde_json::to_string(&Evaluation {
            run_dir: run_dir.to_path_buf(),
            network: which,
            test_acc: acc,
            logged_test_acc: logged,
            reproduced,
        })?
    );
    if !reproduced {
        return Err(Error::Numerical(format!("recomputed test accuracy {acc} differs from the logged {logged:?}")).into());
    }
    Ok(())
}

#[derive(Serialize)]
struct TransferResult<'a> {
    source_run: &'a Path,
    network: &'static str,
    target: &'a DatasetSpec,
    report: ProbeReport,
}

pub fn transfer(run_dir: &Path, target: &Path, out: Option<&Path>, opts: &ProbeOptions) -> Result<()> {
    let source = manifest_config(run_dir)?;
    let (ck, which) = run_network(run_dir)?;
    let target_cfg = ExperimentConfig::load(Some(target))?;
    let target_data = load_dataset(&target_cfg.dataset).context("loading target dataset")?;
    let size = source.dataset.image_size;
    let train = make_transfer_split(&ck.network, size, &target_data.train)?;
    let test = make_transfer_split(&ck.network, size, &target_data.test)?;
    let report = linear_probe(&train, &test, opts)?;
    info!(
        "linear probe: train {:.2}% test {:.2}% after {} iterations",
        report.train_acc, report.test_acc, report.iterations
    );
    let dir = output_dir(out, "transfer")?;
    ExperimentManifest::new("transfer", &source.distill, &target_cfg.dataset, None, &dir)?.save()?;
    let result = TransferResult {
        source_run: run_dir,
        network: which,
        target: &target_cfg.dataset,
        report,
    };
    save_json(&dir.join("transfer.json"), &result)?;
    println!("{}", serde_json::to_string(&result)?);
    Ok(())
}

#[derive(Serialize)]
struct HeatmapSummary {
    run_dir: PathBuf,
    reference: Option<PathBuf>,
    instances: usize,
    frobenius_distance: Option<f64>,
    output_dir: PathBuf,
}

pub fn heatmap(run_dir: &Path, reference: Option<&Path>, instances: usize, out: Option<&Path>) -> Result<()> {
    let cfg = manifest_config(run_dir)?;
    let data = load_data(&cfg)?;
    let n = instances.min(data.test.len());
    let images = data.test.images.slice(s![..n, .., .., ..]).to_owned();
    let (ck, _) = run_network(run_dir)?;
    let dir = output_dir(out, "heatmap")?;
    let m = prediction_heatmap(&ck.network, &images, instances)?;
    write_matrix_csv(&m, &dir.join("heatmap.csv"))?;
    save_heatmap_png(&m, 8, &dir.join("heatmap.png"))?;
    let distance = match reference {
        Some(r) => {
            let (rck, _) = run_network(r)?;
            let rm = prediction_heatmap(&rck.network, &images, instances)?;
            write_matrix_csv(&rm, &dir.join("reference.csv"))?;
            save_heatmap_png(&rm, 8, &dir.join("reference.png"))?;
            Some(frobenius_distance(&m, &rm))
        }
        None => None,
    };
    let summary = HeatmapSummary {
        run_dir: run_dir.to_path_buf(),
        reference: reference.map(Path::to_path_buf),
        instances: m.nrows(),
        frobenius_distance: distance,
        output_dir: dir.clone(),
    };
    save_json(&dir.join("heatmap.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn ari(table: &Path, target: &str, student: &str, out: Option<&Path>) -> Result<()> {
    let file = File::open(table).map_err(|e| Error::Io {
        path: table.to_path_buf(),
        source: e,
    })?;
    let t = AccuracyTable::from_csv(file)?;
    let column = t.ari_column(target, student)?;
    write_ari_csv(std::io::stdout().lock(), &column)?;
    if let Some(path) = out {
        let f = File::create(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        write_ari_csv(f, &column)?;
    }
    Ok(())
}

pub fn list_archs() -> Result<()> {
    println!("{:<20} {:>8} {:>10} {:>8}  stands in for", "name", "feat dim", "params", "base lr");
    for a in ARCHS {
        let params = build_backbone(a.name, 10, 3, 0)?.num_parameters();
        println!("{:<20} {:>8} {:>10} {:>8}  {}", a.name, a.feature_dim, params, a.base_lr, a.analogue);
    }
    Ok(())
}
