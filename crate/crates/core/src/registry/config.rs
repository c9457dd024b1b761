use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CorpusSpec, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Flat experiment description, read from TOML. Missing keys take the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train_corpus_seed: u64,
    pub test_corpus_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub len_lo: usize,
    pub len_hi: usize,

    pub seed_m1: u64,
    pub seed_m2: u64,
    pub seed_m3: u64,

    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f32,
    pub t_max: usize,

    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,

    pub eval_batches: usize,
    pub run_diagnostics: bool,
    pub run_threatlab: bool,
    pub adapter_pairs: usize,
    pub adapter_lambda: f64,
    pub quant_bits: Vec<u32>,
    pub noise_sigmas: Vec<f64>,
    pub noise_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            train_corpus_seed: 1,
            test_corpus_seed: 2,
            n_train: 6000,
            n_test: 800,
            len_lo: 8,
            len_hi: 30,
            seed_m1: 111,
            seed_m2: 222,
            seed_m3: 333,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            dropout: m.dropout,
            t_max: m.t_max,
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            clip_norm: t.clip_norm,
            adam_beta1: t.betas.0,
            adam_beta2: t.betas.1,
            adam_eps: t.adam_eps,
            eval_batches: 6,
            run_diagnostics: true,
            run_threatlab: true,
            adapter_pairs: 512,
            adapter_lambda: 1e-2,
            quant_bits: vec![16, 8, 4, 2],
            noise_sigmas: vec![0.1, 0.5, 1.0],
            noise_seed: 7,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            dropout: self.dropout,
            t_max: self.t_max,
            vocab_size: VOCAB_SIZE,
        }
    }

    /// Training settings for a model initialised from `seed`; the same seed
    /// drives dropout and batch order.
    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            clip_norm: self.clip_norm,
            seed,
            betas: (self.adam_beta1, self.adam_beta2),
            adam_eps: self.adam_eps,
        }
    }

    pub fn train_corpus(&self) -> CorpusSpec {
        CorpusSpec {
            n: self.n_train,
            len_lo: self.len_lo,
            len_hi: self.len_hi,
        }
    }

    pub fn test_corpus(&self) -> CorpusSpec {
        CorpusSpec {
            n: self.n_test,
            ..self.train_corpus()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train(self.seed_m1).validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.len_lo > self.len_hi || self.len_hi + 2 > self.t_max {
            return Err(Error::Config(format!(
                "lengths [{}, {}] do not fit t_max {}",
                self.len_lo, self.len_hi, self.t_max
            )));
        }
        if self.n_train == 0 || self.n_test == 0 || self.eval_batches == 0 {
            return Err(Error::Config("corpus sizes and eval_batches must be positive".into()));
        }
        if [self.seed_m2, self.seed_m3].contains(&self.seed_m1) || self.seed_m2 == self.seed_m3 {
            return Err(Error::Config("M1, M2 and M3 need distinct seeds".into()));
        }
        if let Some(b) = self.quant_bits.iter().find(|b| !(2..=16).contains(*b)) {
            return Err(Error::Config(format!("quantisation bits {b} outside [2, 16]")));
        }
        if self.noise_sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) || self.adapter_lambda < 0.0 {
            return Err(Error::Config("noise σ and adapter λ must be non-negative".into()));
        }
        Ok(())
    }
}
