//! Turns a sequence file into per-client training and test data.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DataConfig, PartitionKind, SplitKind};
use crate::dataio::{
    normalize_and_split, partition_heterogeneous, partition_homogeneous, EventSequence, SequenceRecord,
    NORMALIZED_HORIZON, TRAIN_END, VAL_END,
};
use crate::error::{Error, Result};
use crate::orchestrator::ClientData;
use crate::seed::derive_seed;

const PARTITION_STREAM: u64 = 0x7061_7274_6974;
const SPLIT_STREAM: u64 = 0x7370_6c69_74;

fn group_given(records: &[(SequenceRecord, EventSequence)], n_clients: usize) -> Result<Vec<Vec<EventSequence>>> {
    let mut groups = vec![Vec::new(); n_clients];
    for (i, (rec, seq)) in records.iter().enumerate() {
        let c = rec
            .client
            .ok_or_else(|| Error::Config(format!("record {} has no client field", i + 1)))?;
        if c >= n_clients {
            return Err(Error::Config(format!(
                "record {} belongs to client {c} but n_clients = {n_clients}",
                i + 1
            )));
        }
        groups[c].push(seq.clone());
    }
    Ok(groups)
}

fn split_client(seqs: Vec<EventSequence>, cfg: &DataConfig, seed: u64, client: usize) -> Result<ClientData> {
    match cfg.split {
        SplitKind::Time => {
            let s = normalize_and_split(&seqs)?;
            Ok(ClientData {
                train: s.train,
                test: s.test,
                horizon: NORMALIZED_HORIZON,
                window: TRAIN_END,
                test_interval: (VAL_END, NORMALIZED_HORIZON),
            })
        }
        SplitKind::Sequence => {
            let n = seqs.len();
            if n < 2 {
                return Err(Error::Config(format!(
                    "client {client} has {n} sequence(s); the sequence split needs at least 2"
                )));
            }
            let horizon = seqs[0].horizon();
            if seqs.iter().any(|s| s.horizon() != horizon) {
                return Err(Error::Config(format!("client {client}: sequences have different horizons")));
            }
            let n_test = ((n as f64 * cfg.test_fraction).round() as usize).clamp(1, n - 1);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, SPLIT_STREAM, client as u64])));
            let (test_idx, train_idx) = idx.split_at(n_test);
            let pick = |ids: &[usize]| {
                let mut ids = ids.to_vec();
                ids.sort_unstable();
                ids.into_iter().map(|i| seqs[i].clone()).collect::<Vec<_>>()
            };
            Ok(ClientData {
                train: pick(train_idx),
                test: pick(test_idx),
                horizon,
                window: horizon,
                test_interval: (0.0, horizon),
            })
        }
    }
}

/// Partitions records over `n_clients` clients and splits each client's
/// sequences. Deterministic in `seed`.
pub fn prepare(
    records: &[(SequenceRecord, EventSequence)],
    cfg: &DataConfig,
    n_clients: usize,
    seed: u64,
) -> Result<Vec<ClientData>> {
    if records.is_empty() {
        return Err(Error::Config("data file contains no sequences".into()));
    }
    let with_client = records.iter().filter(|(r, _)| r.client.is_some()).count();
    let kind = match cfg.partition {
        PartitionKind::Auto if with_client == records.len() => PartitionKind::Given,
        PartitionKind::Auto if with_client == 0 => PartitionKind::Homogeneous,
        PartitionKind::Auto => {
            return Err(Error::Config("some records name a client and some do not".into()));
        }
        k => k,
    };
    let seqs: Vec<EventSequence> = records.iter().map(|(_, s)| s.clone()).collect();
    let part_seed = derive_seed(&[seed, PARTITION_STREAM]);
    let groups = match kind {
        PartitionKind::Given => group_given(records, n_clients)?,
        PartitionKind::Homogeneous => partition_homogeneous(&seqs, n_clients, part_seed)?.sequences,
        PartitionKind::Heterogeneous => {
            let (big_k, k) = cfg
                .num_types
                .zip(cfg.types_per_client)
                .ok_or_else(|| Error::Config("heterogeneous partition needs num_types and types_per_client".into()))?;
            partition_heterogeneous(&seqs, big_k, k, n_clients, part_seed)?.sequences
        }
        PartitionKind::Auto => unreachable!(),
    };
    groups
        .into_iter()
        .enumerate()
        .map(|(c, g)| {
            if g.is_empty() {
                return Err(Error::Config(format!("client {c} received no sequences")));
            }
            split_client(g, cfg, seed, c)
        })
        .collect()
}
