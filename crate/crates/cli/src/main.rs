//! `hkd`: pretrain teachers, distill students and analyze the results.

mod analyze;
mod config;
mod grid;
mod plot;
mod run;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use config::Overrides;
use hkd_core::Error;

#[derive(Debug, Parser)]
#[command(name = "hkd", version, about = "Holistic knowledge distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file, output location and per-field overrides.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML experiment config ([dataset] and [distill] tables).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory (default: a timestamped directory under $HKD_OUTPUT_ROOT or ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct CheckpointArgs {
    /// Save a resumable checkpoint every N epochs.
    #[arg(long, default_value_t = 1)]
    pub checkpoint_every: usize,
    /// Keep only the N most recent epoch checkpoints (0 keeps all).
    #[arg(long, default_value_t = 0)]
    pub keep_checkpoints: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the teacher architecture with cross-entropy.
    PretrainTeacher {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Distill a student from a pretrained teacher.
    Distill {
        /// Teacher checkpoint file or pretrain-teacher run directory.
        #[arg(long)]
        teacher: PathBuf,
        /// Continue from an epoch checkpoint of an earlier distill run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        checkpoints: CheckpointArgs,
    },
    /// Recompute the test accuracy of a run from its directory alone.
    Evaluate {
        run_dir: PathBuf,
    },
    /// Linear probe on frozen features of a trained network over another dataset.
    Transfer {
        run_dir: PathBuf,
        /// Config whose [dataset] table names the target dataset.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        probe_lr: f64,
        #[arg(long, default_value_t = 5000)]
        probe_iterations: usize,
        #[arg(long, default_value_t = 0)]
        probe_seed: u64,
    },
    /// Pairwise cosine similarity of a network's predictions on a fixed test batch.
    Heatmap {
        run_dir: PathBuf,
        /// Second run to compare against (Frobenius distance of the matrices).
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        instances: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average relative improvement of one method over every other row of an accuracy table.
    Ari {
        /// CSV: first column method name, one column per teacher/student pair.
        #[arg(long)]
        table: PathBuf,
        #[arg(long, default_value = "HKD+KD")]
        target: String,
        #[arg(long, default_value = "Student")]
        student: String,
        /// Also write the column to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distill under each graph-construction and encoder variant.
    Ablate {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Variants as graph/encoder pairs, e.g. knn/gnn,random/gnn.
        #[arg(long, value_delimiter = ',', default_values_t = grid::DEFAULT_VARIANTS.map(String::from))]
        variants: Vec<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Distill once per value of one config field.
    Sweep {
        #[arg(long)]
        teacher: PathBuf,
        /// Field to vary, e.g. k or beta.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
        seeds: Vec<u64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Show the available backbone architectures.
    ListArchs,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::InvalidArgument(_) => 1,
                Error::Data(_) | Error::Io { .. } | Error::Serialization(_) | Error::Image { .. } => 2,
                Error::Numerical(_) => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::PretrainTeacher { run } => train::pretrain(&run),
        Command::Distill {
            teacher,
            resume,
            run,
            checkpoints,
        } => train::distill(&teacher, resume.as_deref(), &run, &checkpoints),
        Command::Evaluate { run_dir } => analyze::evaluate(&run_dir),
        Command::Transfer {
            run_dir,
            target,
            out,
            probe_lr,
            probe_iterations,
            probe_seed,
        } => analyze::transfer(
            &run_dir,
            &target,
            out.as_deref(),
            &hkd_core::eval::ProbeOptions {
                learning_rate: probe_lr,
                max_iterations: probe_iterations,
                seed: probe_seed,
                ..Default::default()
            },
        ),
        Command::Heatmap {
            run_dir,
            reference,
            instances,
            out,
        } => analyze::heatmap(&run_dir, reference.as_deref(), instances, out.as_deref()),
        Command::Ari {
            table,
            target,
            student,
            out,
        } => analyze::ari(&table, &target, &student, out.as_deref()),
        Command::Ablate {
            teacher,
            seeds,
            variants,
            run,
        } => grid::ablate(&teacher, &seeds, &variants, &run),
        Command::Sweep {
            teacher,
            param,
            values,
            seeds,
            run,
        } => grid::sweep(&teacher, &param, &values, &seeds, &run),
        Command::ListArchs => analyze::list_archs(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
