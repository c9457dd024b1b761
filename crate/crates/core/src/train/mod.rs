//! Teacher-forced training with AdamW and global-norm clipping.

mod optimizer;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optimizer::{adamw_step, clip_global_norm, global_norm, GradMap, OptimizerState};

use crate::data::{make_batches, Batch, TokenId, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::model::{decoder_graph, encoder_graph, BoundParams, ModelParams, Packed};
use crate::tensor::{Graph, TensorError, Var};

pub const DROPOUT_STREAM: u64 = 1;
pub const SHUFFLE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f32,
    pub seed: u64,
    pub betas: (f32, f32),
    pub adam_eps: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.0,
            batch_size: 128,
            epochs: 8,
            clip_norm: 1.0,
            seed: 0,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.clip_norm > 0.0
            && self.batch_size > 0
            && self.weight_decay >= 0.0
            && self.adam_eps > 0.0
            && (0.0..1.0).contains(&self.betas.0)
            && (0.0..1.0).contains(&self.betas.1);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }
}

/// A recorded loss together with the parameter handles it depends on.
pub struct LossRecord {
    pub graph: Graph,
    pub loss: Var,
    pub params: BoundParams,
    /// Number of predicted positions averaged into the loss.
    pub targets: usize,
}

impl LossRecord {
    pub fn value(&self) -> f32 {
        self.graph.value(self.loss).item()
    }

    /// Gradients of the loss for every parameter, in manifest order.
    pub fn gradients(&self) -> Result<GradMap> {
        let mut grads = self.graph.backward(self.loss)?;
        self.params
            .iter()
            .map(|(name, v)| {
                grads
                    .take(v)
                    .map(|t| (name.to_owned(), t))
                    .ok_or_else(|| Error::Contract(format!("no gradient reached {name}")))
            })
            .collect()
    }
}

/// Mean next-token NLL of `batch` reconstructing itself: the encoder reads
/// each full sequence, the decoder reads `seq[..n-1]` and predicts `seq[1..]`.
/// Padding never enters the graph, so pad targets carry no weight.
pub fn teacher_forced_loss(model: &ModelParams, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<LossRecord> {
    let cfg = model.config();
    let rows: Vec<&[TokenId]> = (0..batch.len())
        .map(|i| batch.sequence(i))
        .filter(|s| s.len() >= 2)
        .collect();
    if rows.is_empty() {
        return Err(TensorError::EmptyLoss.into());
    }
    let max = cfg.max_positions();
    if let Some(long) = rows.iter().find(|s| s.len() > max) {
        return Err(Error::Length { len: long.len(), max });
    }
    if let Some(&bad) = rows.iter().flat_map(|s| s.iter()).find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Contract(format!("token id {bad} outside the vocabulary")));
    }
    let src = Packed::from_sequences(rows.iter().copied());
    let tgt_in = Packed::from_sequences(rows.iter().map(|s| &s[..s.len() - 1]));
    let targets: Vec<TokenId> = rows.iter().flat_map(|s| s[1..].iter().copied()).collect();

    let mut g = Graph::new();
    let params = model.bind(&mut g, true)?;
    let mut rng = rng;
    let enc = encoder_graph(&mut g, &params, cfg, &src, rng.as_deref_mut())?;
    let dec = decoder_graph(&mut g, &params, cfg, &tgt_in, enc.output, &src, rng)?;
    let loss = g.cross_entropy(dec.logits, &targets, PAD)?;
    let n = targets.iter().filter(|&&t| t != PAD).count();
    Ok(LossRecord {
        graph: g,
        loss,
        params,
        targets: n,
    })
}

/// Per-epoch mean of the batch losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// One optimisation step on `batch`; returns the batch loss.
pub fn train_step(
    model: &mut ModelParams,
    batch: &Batch,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<f32> {
    let record = teacher_forced_loss(model, batch, Some(dropout_rng))?;
    let loss = record.value();
    if !loss.is_finite() {
        return Err(Error::Training(format!("loss became {loss} at step {}", state.step + 1)));
    }
    let mut grads = record.gradients()?;
    drop(record);
    clip_global_norm(&mut grads, cfg.clip_norm)
        .map_err(|e| Error::Training(format!("step {}: {e}", state.step + 1)))?;
    adamw_step(model, &grads, state, cfg)?;
    Ok(loss)
}

/// Trains `model` on `corpus` in place. Batches are reshuffled every epoch
/// from `cfg.seed`; dropout draws come from a separate stream of the same seed.
pub fn train(model: &mut ModelParams, corpus: &[String], cfg: &TrainConfig, vocab: &Vocabulary) -> Result<TrainTrace> {
    cfg.validate()?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(DROPOUT_STREAM);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let max_len = model.config().t_max;
    let mut state = OptimizerState::default();
    let mut trace = TrainTrace::default();
    for epoch in 0..cfg.epochs {
        let batches = make_batches(corpus, vocab, cfg.batch_size, max_len, Some(shuffle_rng.next_u64()))?;
        let mut total = 0.0f64;
        let mut counted = 0usize;
        for batch in &batches {
            match train_step(model, batch, &mut state, cfg, &mut dropout_rng) {
                Ok(loss) => {
                    total += f64::from(loss);
                    counted += 1;
                }
                Err(Error::Tensor(TensorError::EmptyLoss)) => continue,
                Err(e) => return Err(e),
            }
        }
        if counted == 0 {
            return Err(Error::Training("no batch produced a loss".into()));
        }
        let mean = total / counted as f64;
        log::info!("epoch {} mean loss {mean:.4}", epoch + 1);
        trace.epoch_losses.push(mean);
    }
    trace.steps = state.step;
    Ok(trace)
}
