//! Timeline normalisation, train/validation/test splits and client
//! partitions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EventSequence;
use crate::error::{Error, Result};

/// Common timeline every sequence is rescaled to.
pub const NORMALIZED_HORIZON: f64 = 100.0;
/// End of the training interval `[0, 60]`.
pub const TRAIN_END: f64 = 60.0;
/// End of the validation interval `(60, 80]`; the test interval is `(80, 100]`.
pub const VAL_END: f64 = 80.0;

/// Per-sequence pieces on the normalised clock.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<EventSequence>,
    pub val: Vec<EventSequence>,
    pub test: Vec<EventSequence>,
}

/// Rescales one sequence onto `[0, 100]`.
pub fn normalize(seq: &EventSequence) -> Result<EventSequence> {
    if seq.horizon() == NORMALIZED_HORIZON {
        return Ok(seq.clone());
    }
    let s = NORMALIZED_HORIZON / seq.horizon();
    let times = seq.times().iter().map(|t| (t * s).min(NORMALIZED_HORIZON)).collect();
    EventSequence::new(times, seq.marks().map(<[u32]>::to_vec), NORMALIZED_HORIZON)
}

/// Normalises to `[0, 100]` and splits by timestamp into `[0, 60]`,
/// `(60, 80]` and `(80, 100]`. Every piece keeps the normalised clock.
pub fn normalize_and_split(seqs: &[EventSequence]) -> Result<DatasetSplit> {
    if seqs.is_empty() {
        return Err(Error::invalid("no sequences to split"));
    }
    let mut out = DatasetSplit { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for s in seqs {
        let n = normalize(s)?;
        out.train.push(n.window(0.0, TRAIN_END, true));
        out.val.push(n.window(TRAIN_END, VAL_END, false));
        out.test.push(n.window(VAL_END, NORMALIZED_HORIZON, false));
    }
    Ok(out)
}

/// Which event types and sequences each client receives.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    /// Event types per client; empty when the partition ignores marks.
    pub types: Vec<Vec<u32>>,
    pub sequences: Vec<Vec<EventSequence>>,
}

fn deal(n: usize, clients: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out = vec![Vec::new(); clients];
    for (i, s) in order.into_iter().enumerate() {
        out[i % clients].push(s);
    }
    out.iter_mut().for_each(|v| v.sort_unstable());
    out
}

/// Shuffles sequences into `clients` groups of equal size (within one).
pub fn partition_homogeneous(seqs: &[EventSequence], clients: usize, seed: u64) -> Result<PartitionPlan> {
    if clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = deal(seqs.len(), clients, &mut rng);
    Ok(PartitionPlan {
        types: vec![Vec::new(); clients],
        sequences: groups.iter().map(|g| g.iter().map(|&i| seqs[i].clone()).collect()).collect(),
    })
}

/// Gives each of `clients` clients `k` of the `num_types` event types and an
/// equal share of the sequences, filtered to those types.
pub fn partition_heterogeneous(
    seqs: &[EventSequence],
    num_types: usize,
    k: usize,
    clients: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if k == 0 || k >= num_types {
        return Err(Error::invalid(format!(
            "types per client k = {k} must satisfy 1 <= k < K = {num_types}"
        )));
    }
    if clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    for (i, s) in seqs.iter().enumerate() {
        let marks = s
            .marks()
            .ok_or_else(|| Error::invalid(format!("sequence {i} has no event types")))?;
        if let Some(m) = marks.iter().find(|m| **m as usize >= num_types) {
            return Err(Error::invalid(format!("sequence {i}: event type {m} >= K = {num_types}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let types: Vec<Vec<u32>> = (0..clients)
        .map(|_| {
            let mut all: Vec<u32> = (0..num_types as u32).collect();
            all.shuffle(&mut rng);
            let mut t = all[..k].to_vec();
            t.sort_unstable();
            t
        })
        .collect();
    let groups = deal(seqs.len(), clients, &mut rng);
    let sequences = groups
        .iter()
        .zip(&types)
        .map(|(g, t)| g.iter().map(|&i| seqs[i].filter_marks(t)).collect())
        .collect();
    Ok(PartitionPlan { types, sequences })
}
