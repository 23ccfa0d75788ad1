use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Event times on `[0, horizon]` with optional integer type marks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    marks: Option<Vec<u32>>,
    horizon: f64,
}

impl EventSequence {
    pub fn new(times: Vec<f64>, marks: Option<Vec<u32>>, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if let Some(m) = &marks {
            if m.len() != times.len() {
                return Err(Error::invalid(format!(
                    "marks length {} does not match times length {}",
                    m.len(),
                    times.len()
                )));
            }
        }
        if let Some(i) = times.iter().position(|t| !(t.is_finite() && *t >= 0.0 && *t <= horizon)) {
            return Err(Error::invalid(format!(
                "time {} at index {i} outside [0, {horizon}]",
                times[i]
            )));
        }
        if let Some(i) = times.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::invalid(format!("times unsorted at index {}", i + 1)));
        }
        Ok(Self { times, marks, horizon })
    }

    pub fn unmarked(times: Vec<f64>, horizon: f64) -> Result<Self> {
        Self::new(times, None, horizon)
    }

    pub fn empty(horizon: f64) -> Result<Self> {
        Self::new(Vec::new(), None, horizon)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn marks(&self) -> Option<&[u32]> {
        self.marks.as_deref()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Whether two consecutive events share a timestamp.
    pub fn has_ties(&self) -> bool {
        self.times.windows(2).any(|w| w[0] == w[1])
    }

    /// Events whose mark is in `keep`; unmarked sequences are returned whole.
    pub fn filter_marks(&self, keep: &[u32]) -> Self {
        match &self.marks {
            None => self.clone(),
            Some(marks) => {
                let (times, marks): (Vec<f64>, Vec<u32>) = self
                    .times
                    .iter()
                    .zip(marks)
                    .filter(|(_, m)| keep.contains(m))
                    .map(|(t, m)| (*t, *m))
                    .unzip();
                Self {
                    times,
                    marks: Some(marks),
                    horizon: self.horizon,
                }
            }
        }
    }

    /// Events with `lo < t <= hi` (or `lo <= t` when `closed_low`), keeping
    /// the original clock and horizon.
    pub(crate) fn window(&self, lo: f64, hi: f64, closed_low: bool) -> Self {
        let keep = |t: f64| (if closed_low { t >= lo } else { t > lo }) && t <= hi;
        let idx: Vec<usize> = (0..self.times.len()).filter(|&i| keep(self.times[i])).collect();
        Self {
            times: idx.iter().map(|&i| self.times[i]).collect(),
            marks: self.marks.as_ref().map(|m| idx.iter().map(|&i| m[i]).collect()),
            horizon: self.horizon,
        }
    }
}
