//! Event-sequence data: synthetic generation, file ingestion, splitting and
//! client partitioning.

mod io;
mod sequence;
mod simulate;
mod split;

pub use io::{load_jsonl, load_records, write_intensity_csv, write_jsonl, SequenceRecord};
pub use sequence::EventSequence;
pub use simulate::{simulate_sgcp, superpose, GroundTruth, Simulation, Simulator, TRUTH_GRID};
pub use split::{
    normalize, normalize_and_split, partition_heterogeneous, partition_homogeneous, DatasetSplit,
    PartitionPlan, NORMALIZED_HORIZON, TRAIN_END, VAL_END,
};
