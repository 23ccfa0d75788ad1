//! On-disk formats: parameter records, model files and metrics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::DataConfig;
use crate::client::ClientState;
use crate::error::{Error, Result};
use crate::kernel::PACKING_VERSION;
use crate::numeric::DiagGaussian;
use crate::orchestrator::{FedConfig, RoundMetrics, ServerState};

/// Format tag of model files.
pub const MODEL_VERSION: &str = "fedpp-model-v1";

pub const METRICS_HEADER: [&str; 5] = ["round", "participants", "mean_test_loglik", "mean_elbo", "wall_time_ms"];

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    if !path.is_file() {
        return Err(Error::invalid(format!("{what} {} not found", path.display())));
    }
    let reader = BufReader::new(File::open(path)?);
    serde_json::from_reader(reader).map_err(|e| Error::invalid(format!("{what} {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn check_version(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::VersionMismatch { found: found.into(), expected: expected.into() });
    }
    Ok(())
}

/// A list of diagonal Gaussians of one dimension, tagged with the
/// parameter packing version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecordFile {
    pub version: String,
    pub dim: usize,
    pub records: Vec<DiagGaussian>,
}

impl ParamRecordFile {
    pub fn new(records: Vec<DiagGaussian>) -> Result<Self> {
        let dim = records.first().map(DiagGaussian::dim).unwrap_or(0);
        let f = Self { version: PACKING_VERSION.into(), dim, records };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        check_version(&self.version, PACKING_VERSION)?;
        if self.records.is_empty() {
            return Err(Error::invalid("parameter file has no records"));
        }
        for r in &self.records {
            if r.dim() != self.dim {
                return Err(Error::DimensionMismatch { expected: self.dim, actual: r.dim() });
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: Self = read_json(path, "parameter file")?;
        f.validate()?;
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Everything needed to evaluate a trained run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: String,
    pub packing: String,
    pub seed: u64,
    pub data: DataConfig,
    pub config: FedConfig,
    pub server: ServerState,
    /// Clients evaluated in the last round.
    pub final_evaluated: Vec<usize>,
    pub clients: Vec<ClientState>,
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            version: String,
            packing: String,
        }
        let h: Header = read_json(path, "model file")?;
        check_version(&h.version, MODEL_VERSION)?;
        check_version(&h.packing, PACKING_VERSION)?;
        read_json(path, "model file")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// CSV metrics sink that flushes after every round, so an aborted run keeps
/// the rows already written.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::Writer::from_path(path)?;
        inner.write_record(METRICS_HEADER)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, m: &RoundMetrics) -> Result<()> {
        let ids: Vec<String> = m.participant_ids.iter().map(usize::to_string).collect();
        self.inner.write_record([
            m.round.to_string(),
            ids.join(";"),
            m.mean_test_loglik.to_string(),
            m.mean_elbo.to_string(),
            m.wall_time_ms.to_string(),
        ])?;
        self.inner.flush()?;
        Ok(())
    }
}
