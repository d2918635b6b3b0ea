//! JSON run reports and prediction files.
//!
//! Both carry a four-letter `magic` tag and a `schema_version`, checked on
//! read. Floats are written in shortest round-trip form, so re-serializing a
//! parsed file reproduces it byte for byte.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoder::EncoderSpec;
use crate::ensemble::{EnsembleReport, ModelPredictions};
use crate::error::{Error, FormatError, Result};
use crate::metrics::MetricsReport;
use crate::numeric::Precision;
use crate::pipeline::AblationReport;
use crate::trainer::{Compactness, TrainReport};

pub const REPORT_MAGIC: &str = "FSRP";
pub const PREDICTIONS_MAGIC: &str = "FSPM";
pub const SCHEMA_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    Train,
    Eval,
    Ensemble,
    Ablate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub model_id: String,
    pub encoder: EncoderSpec,
    pub precision: Precision,
    pub param_checksum: String,
    pub train: Option<TrainReport>,
    pub eval: Option<MetricsReport>,
    pub compactness: Option<Compactness>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub magic: String,
    pub schema_version: u16,
    pub kind: ReportKind,
    /// The fully resolved configuration, flags included.
    pub config: RunConfig,
    /// Command-line overrides applied on top of the config file.
    #[serde(default)]
    pub overrides: Vec<String>,
    pub models: Vec<ModelSection>,
    pub ensemble: Option<EnsembleReport>,
    pub ablation: Option<AblationReport>,
}

impl RunReport {
    pub fn new(kind: ReportKind, config: RunConfig) -> Self {
        Self {
            magic: REPORT_MAGIC.into(),
            schema_version: SCHEMA_VERSION,
            kind,
            config,
            overrides: Vec::new(),
            models: Vec::new(),
            ensemble: None,
            ablation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionsFile {
    pub magic: String,
    pub schema_version: u16,
    pub predictions: ModelPredictions,
}

#[derive(Deserialize)]
struct Header {
    magic: String,
    schema_version: u16,
}

fn magic_bytes(s: &str) -> [u8; 4] {
    let mut out = [0u8; 4];
    for (o, b) in out.iter_mut().zip(s.bytes()) {
        *o = b;
    }
    out
}

fn json_err(e: serde_json::Error) -> Error {
    if e.is_eof() {
        FormatError::Truncated.into()
    } else if e.is_syntax() {
        FormatError::Malformed(e.to_string()).into()
    } else {
        Error::Json(e)
    }
}

fn decode_checked<T: DeserializeOwned>(text: &str, magic: &str) -> Result<T> {
    let header: Header = serde_json::from_str(text).map_err(json_err)?;
    if header.magic != magic {
        return Err(FormatError::BadMagic {
            expected: magic_bytes(magic),
            found: magic_bytes(&header.magic),
        }
        .into());
    }
    if header.schema_version != SCHEMA_VERSION {
        return Err(FormatError::UnsupportedVersion(header.schema_version).into());
    }
    serde_json::from_str(text).map_err(json_err)
}

pub fn encode_report(report: &RunReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

pub fn decode_report(text: &str) -> Result<RunReport> {
    decode_checked(text, REPORT_MAGIC)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn write_report(path: impl AsRef<Path>, report: &RunReport) -> Result<()> {
    std::fs::write(path, encode_report(report)?)?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<RunReport> {
    decode_report(&read_text(path.as_ref())?)
}

pub fn encode_predictions(predictions: &ModelPredictions) -> Result<String> {
    let file = PredictionsFile {
        magic: PREDICTIONS_MAGIC.into(),
        schema_version: SCHEMA_VERSION,
        predictions: predictions.clone(),
    };
    Ok(serde_json::to_string(&file)? + "\n")
}

pub fn decode_predictions(text: &str) -> Result<ModelPredictions> {
    Ok(decode_checked::<PredictionsFile>(text, PREDICTIONS_MAGIC)?.predictions)
}

pub fn write_predictions(path: impl AsRef<Path>, predictions: &ModelPredictions) -> Result<()> {
    std::fs::write(path, encode_predictions(predictions)?)?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<ModelPredictions> {
    decode_predictions(&read_text(path.as_ref())?)
}
