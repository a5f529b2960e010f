//! Report rows and their CSV/JSON encodings. Column order is fixed by the
//! field order of each row type; JSON objects carry the same fields.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::ExperimentError;

/// One (unit, size) cell of the shuffled-summation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SshRow {
    pub unit: String,
    pub size: usize,
    pub mean: f64,
    pub rsd: f64,
    pub correct_bits: f64,
    pub shuffles: usize,
}

/// One point of an accumulator sweep. Empty accumulator fields mark the
/// FMA-chain baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub dataset: String,
    pub format: String,
    pub ovf: Option<u32>,
    pub msb: Option<i32>,
    pub lsb: Option<i32>,
    pub top1: f64,
    pub top5: f64,
}

pub trait ReportRow: Serialize + DeserializeOwned {
    const HEADER: &'static [&'static str];
}

impl ReportRow for SshRow {
    const HEADER: &'static [&'static str] = &["unit", "size", "mean", "rsd", "correct_bits", "shuffles"];
}

impl ReportRow for SweepRow {
    const HEADER: &'static [&'static str] = &["model", "dataset", "format", "ovf", "msb", "lsb", "top1", "top5"];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    /// JSON for `.json` paths, CSV otherwise.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => ReportFormat::Json,
            _ => ReportFormat::Csv,
        }
    }
}

impl FromStr for ReportFormat {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(ExperimentError::Invalid(format!("unknown report format `{other}`"))),
        }
    }
}

/// Writes rows; the CSV header is present even when there are no rows.
pub fn write_rows<R: ReportRow, W: Write>(rows: &[R], out: W, format: ReportFormat) -> Result<(), ExperimentError> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            w.write_record(R::HEADER)?;
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        ReportFormat::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, rows)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn read_rows<R: ReportRow, In: Read>(input: In, format: ReportFormat) -> Result<Vec<R>, ExperimentError> {
    match format {
        ReportFormat::Csv => {
            let mut r = csv::Reader::from_reader(input);
            let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
            if header != R::HEADER {
                return Err(ExperimentError::Invalid(format!("unexpected CSV header {header:?}")));
            }
            Ok(r.deserialize().collect::<Result<_, _>>()?)
        }
        ReportFormat::Json => Ok(serde_json::from_reader(input)?),
    }
}

/// Writes rows to `path`, CSV or JSON as requested.
pub fn report_emit<R: ReportRow>(rows: &[R], path: &Path, format: ReportFormat) -> Result<(), ExperimentError> {
    write_rows(rows, BufWriter::new(File::create(path)?), format)
}

pub fn report_load<R: ReportRow>(path: &Path, format: ReportFormat) -> Result<Vec<R>, ExperimentError> {
    read_rows(File::open(path)?, format)
}
