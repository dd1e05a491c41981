//! Versioned JSON checkpoints. Floats are written with round-trip precision,
//! so a reload restores every weight bit for bit.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::trainer::TrainState;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::models::Backbone;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub network: Backbone,
    pub stats: NormStats,
    pub epochs: usize,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillCheckpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub teacher_hash: String,
    pub state: TrainState,
}

/// Hex SHA-256 of the compact JSON encoding of `value`.
pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, value)?;
    w.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

fn check_version(found: u32, path: &Path) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{} has checkpoint format {found}, this build reads {FORMAT_VERSION}",
            path.display()
        )));
    }
    Ok(())
}

/// A trained network with the normalization it expects. A missing file is
/// a configuration error.
pub fn load_network(path: &Path) -> Result<NetworkCheckpoint> {
    let ck: NetworkCheckpoint = load_json(path).map_err(|e| match e {
        Error::Io { .. } => Error::Config(format!("network checkpoint unavailable: {e}")),
        other => other,
    })?;
    check_version(ck.format_version, path)?;
    Ok(ck)
}

pub fn load_distill(path: &Path) -> Result<DistillCheckpoint> {
    let ck: DistillCheckpoint = load_json(path)?;
    check_version(ck.format_version, path)?;
    Ok(ck)
}
