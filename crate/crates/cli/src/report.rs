//! Semicolon-separated error tables.

use std::io::{Read, Write};
use std::path::Path;

use adann_core::ErrorReport;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const HEADER: [&str; 6] = [
    "method",
    "L1_error",
    "L2_error",
    "trainable_params",
    "training_time",
    "eval_time",
];

pub const FNO_PLACEHOLDER: &str = "fno: not implemented";

/// One table row. Empty cells mark values that do not exist for the method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    #[serde(rename = "L1_error")]
    pub l1: Option<f64>,
    #[serde(rename = "L2_error")]
    pub l2: Option<f64>,
    pub trainable_params: Option<usize>,
    /// Seconds.
    pub training_time: Option<f64>,
    /// Seconds for one fixed-size batch of evaluations.
    pub eval_time: Option<f64>,
}

impl ReportRow {
    pub fn from_report(method: impl Into<String>, r: &ErrorReport, eval_time: f64) -> Self {
        Self {
            method: method.into(),
            l1: Some(r.l1),
            l2: Some(r.l2),
            trainable_params: Some(r.params),
            training_time: Some(r.train_seconds),
            eval_time: Some(eval_time),
        }
    }

    pub fn placeholder(method: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            l1: None,
            l2: None,
            trainable_params: None,
            training_time: None,
            eval_time: None,
        }
    }
}

pub fn write_rows<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b';')
        .has_headers(false)
        .from_writer(out);
    w.write_record(HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut r = csv::ReaderBuilder::new().delimiter(b';').from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(HEADER) {
        bail!(
            "column mismatch: expected {:?}, found {:?}",
            HEADER.join(";"),
            header.iter().collect::<Vec<_>>().join(";")
        );
    }
    r.deserialize().map(|row| Ok(row?)).collect()
}

pub fn save_rows(rows: &[ReportRow], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_rows(rows, f)
}

pub fn load_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_rows(f).with_context(|| format!("in {}", path.display()))
}

/// Table order: learned baselines, the FNO placeholder, classical baselines, then
/// run rows. The placeholder only appears alongside baselines.
pub fn merge(runs: Vec<ReportRow>, baselines: Vec<ReportRow>) -> Vec<ReportRow> {
    if baselines.is_empty() {
        return runs;
    }
    let (learned, classical): (Vec<_>, Vec<_>) = baselines
        .into_iter()
        .filter(|r| r.method != FNO_PLACEHOLDER)
        .partition(|r| r.method.starts_with("ann"));
    let mut out = learned;
    out.push(ReportRow::placeholder(FNO_PLACEHOLDER));
    out.extend(classical);
    out.extend(runs);
    out
}
