//! Checkpoints, experiment configuration, orchestration and reports.

mod checkpoint;
mod config;
mod experiment;
mod report;

pub use checkpoint::{
    creator_stamp, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointMeta, ManifestEntry,
    FORMAT_VERSION, MAGIC,
};
pub use config::ExperimentConfig;
pub use experiment::{default_adapter_pairs, Experiment, LoadedModel, RunDir, DIAGNOSTIC_PAIRS, MODEL_IDS};
pub use report::{
    config_hash, sha256_hex, AdapterReport, DiagnosticsEntry, MatrixEntry, ModelEntry, RunReport, ThreatSection,
};
