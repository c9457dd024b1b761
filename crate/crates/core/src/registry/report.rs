use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentConfig;
use crate::diag::DiagnosticsRow;
use crate::error::Result;
use crate::eval::MetricsRow;
use crate::model::ModelConfig;
use crate::threat::SweepPoint;
use crate::train::TrainConfig;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of everything that defines a model's training run.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(&(model, train))?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: String,
    pub seed: u64,
    /// Models sharing a lineage hold the same key (clones, same-seed retrains).
    pub lineage: String,
    pub config_hash: String,
    pub checkpoint_sha256: String,
    pub num_parameters: usize,
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    #[serde(flatten)]
    pub row: MetricsRow,
    pub encoder_config_hash: String,
    pub decoder_config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsEntry {
    #[serde(flatten)]
    pub row: DiagnosticsRow,
    pub a_config_hash: String,
    pub b_config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterReport {
    pub source: String,
    pub target: String,
    pub lambda: f64,
    pub n_train_pairs: usize,
    pub train_rows: usize,
    /// Adapter training sequences are drawn from the training corpus and
    /// none of them occurs in the evaluation batches.
    pub train_eval_disjoint: bool,
    pub metrics: MetricsRow,
    pub encoder_config_hash: String,
    pub decoder_config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreatSection {
    pub adapters: Vec<AdapterReport>,
    /// Identity adapter on the self pair of the first model.
    pub identity_self: MetricsRow,
    pub identity_matches_self: bool,
    pub quantization_model: String,
    pub quantization: Vec<SweepPoint>,
    pub quantization_non_increasing: bool,
    pub noise: Vec<SweepPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub version: String,
    pub device_label: Option<String>,
    pub config: ExperimentConfig,
    pub models: Vec<ModelEntry>,
    pub matrix: Vec<MatrixEntry>,
    pub binding_advantage: f64,
    pub diagnostics: Option<Vec<DiagnosticsEntry>>,
    pub threatlab: Option<ThreatSection>,
}

impl RunReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn model(&self, id: &str) -> Option<&ModelEntry> {
        self.models.iter().find(|m| m.id == id)
    }

    pub fn row(&self, encoder: &str, decoder: &str) -> Option<&MetricsRow> {
        self.matrix
            .iter()
            .map(|e| &e.row)
            .find(|r| r.encoder == encoder && r.decoder == decoder)
    }

    pub fn diagnostics_row(&self, a: &str, b: &str) -> Option<&DiagnosticsRow> {
        self.diagnostics
            .as_ref()?
            .iter()
            .map(|e| &e.row)
            .find(|r| r.model_a == a && r.model_b == b)
    }
}
