//! Shared fixtures for the criterion benchmarks.

use mmfuse::synthdata::{make_redundant, DatasetSplits};

/// A small two-modality dataset reused across benchmark targets.
pub fn bench_dataset() -> DatasetSplits {
    make_redundant(2, &[8, 8], 60, 0.1, 7).expect("fixture dataset")
}
