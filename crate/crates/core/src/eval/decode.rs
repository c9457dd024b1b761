use serde::{Deserialize, Serialize};

use crate::data::{Batch, TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{encode, IncrementalDecoder, Memory, ModelParams};
use crate::tensor::ops::argmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    TMax,
}

/// Greedy hypothesis without the leading bos and without the stop token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub ids: Vec<TokenId>,
    pub stop: StopReason,
}

/// Greedy decoding of every memory from `<bos>`. Each sequence stops at its
/// own first eos (or pad) and is frozen; otherwise it runs to `t_max` tokens.
pub fn greedy_decode_batch(decoder: &ModelParams, memories: &[Memory], t_max: usize) -> Result<Vec<DecodeResult>> {
    let limit = decoder.config().max_positions();
    if t_max > limit {
        return Err(Error::Length { len: t_max, max: limit });
    }
    let mut out: Vec<Option<DecodeResult>> = vec![None; memories.len()];
    let mut hyps: Vec<Vec<TokenId>> = vec![Vec::new(); memories.len()];
    let mut state = IncrementalDecoder::new(decoder, memories)?;
    let mut active: Vec<usize> = (0..memories.len()).collect();
    let mut feed: Vec<TokenId> = vec![BOS; memories.len()];
    if t_max == 0 {
        return Ok(hyps
            .into_iter()
            .map(|ids| DecodeResult { ids, stop: StopReason::TMax })
            .collect());
    }
    while !active.is_empty() {
        let logits = state.step(&active, &feed)?;
        let mut next_active = Vec::with_capacity(active.len());
        let mut next_feed = Vec::with_capacity(active.len());
        for (i, &s) in active.iter().enumerate() {
            let tok = argmax(logits.row(i)) as TokenId;
            if tok == EOS || tok == PAD {
                out[s] = Some(DecodeResult {
                    ids: std::mem::take(&mut hyps[s]),
                    stop: StopReason::Eos,
                });
                continue;
            }
            hyps[s].push(tok);
            if hyps[s].len() == t_max {
                out[s] = Some(DecodeResult {
                    ids: std::mem::take(&mut hyps[s]),
                    stop: StopReason::TMax,
                });
            } else {
                next_active.push(s);
                next_feed.push(tok);
            }
        }
        active = next_active;
        feed = next_feed;
    }
    Ok(out.into_iter().map(|r| r.expect("every sequence stops")).collect())
}

pub fn greedy_decode(decoder: &ModelParams, memory: &Memory, t_max: usize) -> Result<DecodeResult> {
    Ok(greedy_decode_batch(decoder, std::slice::from_ref(memory), t_max)?.remove(0))
}

/// Checks that two models can exchange memories.
pub fn check_compatible(encoder: &ModelParams, decoder: &ModelParams) -> Result<()> {
    let (a, b) = (encoder.config(), decoder.config());
    if a.d_model != b.d_model || a.t_max != b.t_max || a.vocab_size != b.vocab_size {
        return Err(Error::Contract(format!(
            "encoder (d_model {}, t_max {}) and decoder (d_model {}, t_max {}) are incompatible",
            a.d_model, a.t_max, b.d_model, b.t_max
        )));
    }
    Ok(())
}

/// Memory and source mask come from `encoder` once; `decoder` then runs the
/// same greedy procedure it uses for its own memories.
pub fn cross_decode(encoder: &ModelParams, decoder: &ModelParams, batch: &Batch) -> Result<Vec<DecodeResult>> {
    check_compatible(encoder, decoder)?;
    let memories = encode(encoder, batch, None)?;
    greedy_decode_batch(decoder, &memories, decoder.config().t_max)
}
