use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;

/// Top-1 accuracy in percent; ties in a row go to the lowest class index.
pub fn accuracy(predictions: &Matrix, labels: &[usize]) -> Result<f64> {
    let (n, k) = predictions.dim();
    if n == 0 || n != labels.len() {
        invalid!("{n} prediction rows but {} labels", labels.len());
    }
    if k == 0 {
        invalid!("predictions have no classes");
    }
    let correct = predictions
        .outer_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.iter().copied()) == y)
        .count();
    Ok(100.0 * correct as f64 / n as f64)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Accuracies (percent) of one teacher/student combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AriInput {
    pub name: String,
    pub acc_hkd: f64,
    pub acc_bkd: f64,
    pub acc_stu: f64,
}

/// Average relative improvement, `(1/M) Σ (hkd − bkd)/(bkd − stu) × 100`.
pub fn ari(rows: &[AriInput]) -> Result<f64> {
    if rows.is_empty() {
        invalid!("ARI needs at least one combination");
    }
    let mut sum = 0.0;
    for r in rows {
        let denom = r.acc_bkd - r.acc_stu;
        if denom == 0.0 {
            invalid!(
                "combination '{}' has identical baseline and student accuracy ({})",
                r.name,
                r.acc_bkd
            );
        }
        sum += (r.acc_hkd - r.acc_bkd) / denom;
    }
    Ok(100.0 * sum / rows.len() as f64)
}

/// Accuracy table in the usual layout: one row per method, one column per
/// teacher/student combination.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    pub combinations: Vec<String>,
    pub methods: Vec<(String, Vec<f64>)>,
}

fn is_ari_column(h: &str) -> bool {
    h.trim().to_ascii_lowercase().starts_with("ari")
}

impl AccuracyTable {
    /// Reads a CSV whose first column names the method. Columns whose header
    /// starts with "ARI" are ignored.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Data(format!("accuracy table header: {e}")))?
            .clone();
        let keep: Vec<usize> = (1..headers.len()).filter(|&i| !is_ari_column(&headers[i])).collect();
        if keep.is_empty() {
            return Err(Error::Data("accuracy table has no combination columns".into()));
        }
        let combinations = keep.iter().map(|&i| headers[i].to_string()).collect();
        let mut methods = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("accuracy table row {}: {e}", line + 2)))?;
            let name = rec.get(0).unwrap_or("").to_string();
            let values = keep
                .iter()
                .map(|&i| {
                    let cell = rec.get(i).unwrap_or("");
                    cell.parse::<f64>()
                        .map_err(|_| Error::Data(format!("row '{name}', column '{}': '{cell}' is not a number", &headers[i])))
                })
                .collect::<Result<Vec<_>>>()?;
            methods.push((name, values));
        }
        Ok(Self { combinations, methods })
    }

    pub fn row(&self, name: &str) -> Option<&[f64]> {
        self.methods
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_slice())
    }

    /// ARI of `target` over every other method row (the student and teacher
    /// rows excluded).
    pub fn ari_column(&self, target: &str, student: &str) -> Result<Vec<(String, f64)>> {
        let hkd = self
            .row(target)
            .ok_or_else(|| Error::Data(format!("table has no '{target}' row")))?;
        let stu = self
            .row(student)
            .ok_or_else(|| Error::Data(format!("table has no '{student}' row")))?;
        let mut out = Vec::new();
        for (name, bkd) in &self.methods {
            let skip = [target, student, "teacher"];
            if skip.iter().any(|s| name.eq_ignore_ascii_case(s)) {
                continue;
            }
            let rows: Vec<AriInput> = self
                .combinations
                .iter()
                .enumerate()
                .map(|(i, c)| AriInput {
                    name: format!("{name} / {c}"),
                    acc_hkd: hkd[i],
                    acc_bkd: bkd[i],
                    acc_stu: stu[i],
                })
                .collect();
            out.push((name.clone(), ari(&rows)?));
        }
        Ok(out)
    }
}

pub fn write_ari_csv<W: Write>(writer: W, column: &[(String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Data(format!("writing ARI table: {e}"));
    w.write_record(["method", "ARI (%)"]).map_err(io)?;
    for (name, v) in column {
        w.write_record([name.as_str(), &format!("{v:.2}")]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Data(format!("writing ARI table: {e}")))?;
    Ok(())
}
