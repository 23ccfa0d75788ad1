//! Line-delimited JSON sequence files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EventSequence;
use crate::error::{Error, Result};

/// One line of a sequence file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceRecord {
    /// Owning client, when the file is already partitioned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client: Option<usize>,
    pub times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marks: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
}

impl SequenceRecord {
    pub fn from_sequence(seq: &EventSequence, client: Option<usize>) -> Self {
        Self {
            client,
            times: seq.times().to_vec(),
            marks: seq.marks().map(<[u32]>::to_vec),
            horizon: Some(seq.horizon()),
        }
    }

    /// Validates into a sequence; the horizon defaults to the last event.
    pub fn to_sequence(&self) -> Result<EventSequence> {
        if let Some(i) = self.times.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::invalid(format!("unsorted at index {}", i + 1)));
        }
        let horizon = match self.horizon {
            Some(h) => h,
            None => self.times.last().copied().unwrap_or(0.0),
        };
        EventSequence::new(self.times.clone(), self.marks.clone(), horizon)
    }
}

/// Reads every record, failing on the first bad line with its number.
pub fn load_records(path: &Path) -> Result<Vec<(SequenceRecord, EventSequence)>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: SequenceRecord = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        if rec.times.windows(2).any(|w| w[1] < w[0]) {
            return Err(fail("unsorted".into()));
        }
        let seq = rec.to_sequence().map_err(|e| fail(e.to_string()))?;
        out.push((rec, seq));
    }
    if out.is_empty() {
        log::warn!("{}: no sequences", path.display());
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<EventSequence>> {
    Ok(load_records(path)?.into_iter().map(|(_, s)| s).collect())
}

pub fn write_jsonl(path: &Path, records: &[SequenceRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `t,lambda` rows.
pub fn write_intensity_csv(path: &Path, t: &[f64], lambda: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "lambda"])?;
    for (t, l) in t.iter().zip(lambda) {
        w.write_record([t.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
