//! Staged training: plans, task mixtures, the optimization loop, early
//! stopping, metrics logs and checkpoints.

pub mod checkpoint;
pub mod data;
pub mod early_stop;
pub mod metrics;
pub mod mixture;
pub mod plan;
pub mod trainer;

pub use checkpoint::{checkpoint_precision, load_checkpoint, save_checkpoint, Checkpoint};
pub use early_stop::{EarlyStopping, StopDecision};
pub use metrics::{metrics_csv, write_metrics_csv, MetricsRow, METRICS_HEADER};
pub use mixture::DatasetMixture;
pub use plan::{DataSource, DatasetSpec, ModelSettings, StageKind, StageSpec, TaskKind, TrainPlan};
pub use trainer::{run_pipeline, Pipeline, RunOptions, RunStatus, StageReport};

/// Deterministic sub-seed for a named component of a run.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then a splitmix64 finalizer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
