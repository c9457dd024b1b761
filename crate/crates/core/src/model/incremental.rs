//! Step-by-step decoder used for greedy generation.
//!
//! Keys and values of earlier positions are kept per layer so each step only
//! processes the newest token. Every kernel call matches the tape forward row
//! for row, so the logits equal a full re-run on the prefix.

use super::forward::{sinusoidal_pe, stack_memories, Memory};
use super::{ModelParams, LAYER_NORM_EPS};
use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::tensor::kernels::{gemm, Layout};
use crate::tensor::ops::{self, AttnView};
use crate::tensor::Tensor;

pub struct IncrementalDecoder<'m> {
    model: &'m ModelParams,
    pe: Tensor,
    mem_spans: Vec<(usize, usize)>,
    mem_pad: Vec<bool>,
    /// Per layer, projected memory rows for every sequence.
    cross_k: Vec<Vec<f32>>,
    cross_v: Vec<Vec<f32>>,
    /// Per layer and sequence, self-attention keys/values seen so far.
    self_k: Vec<Vec<Vec<f32>>>,
    self_v: Vec<Vec<Vec<f32>>>,
    position: usize,
}

fn project(x: &[f32], rows: usize, w: &Tensor) -> Vec<f32> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    gemm(x, Layout::Normal, w.data(), Layout::Normal, rows, n, k)
}

fn add_norm(model: &ModelParams, prefix: &str, x: &mut Vec<f32>, sub: &[f32]) {
    for (a, b) in x.iter_mut().zip(sub) {
        *a += b;
    }
    let d = model.config().d_model;
    let (y, _) = ops::layer_norm_forward(
        x,
        d,
        model.tensor(&format!("{prefix}.gain")).data(),
        model.tensor(&format!("{prefix}.bias")).data(),
        LAYER_NORM_EPS,
    );
    *x = y;
}

impl<'m> IncrementalDecoder<'m> {
    pub fn new(model: &'m ModelParams, memories: &[Memory]) -> Result<Self> {
        let cfg = model.config();
        let (stacked, rows) = stack_memories(memories, cfg.d_model)?;
        let n_rows = rows.key_pad.len();
        let mut cross_k = Vec::with_capacity(cfg.n_layers);
        let mut cross_v = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            cross_k.push(project(stacked.data(), n_rows, model.tensor(&format!("dec.{l}.cross_attn.w_k"))));
            cross_v.push(project(stacked.data(), n_rows, model.tensor(&format!("dec.{l}.cross_attn.w_v"))));
        }
        let n = memories.len();
        Ok(Self {
            model,
            pe: sinusoidal_pe(cfg.max_positions(), cfg.d_model)?,
            mem_spans: rows.spans,
            mem_pad: rows.key_pad,
            cross_k,
            cross_v,
            self_k: vec![vec![Vec::new(); n]; cfg.n_layers],
            self_v: vec![vec![Vec::new(); n]; cfg.n_layers],
            position: 0,
        })
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Feeds `tokens[i]` at the current position for sequence `active[i]` and
    /// returns their next-token logits (`active.len() × |V|`). Sequences left
    /// out of `active` are frozen and must stay out from then on.
    pub fn step(&mut self, active: &[usize], tokens: &[TokenId]) -> Result<Tensor> {
        let model = self.model;
        let cfg = model.config();
        let d = cfg.d_model;
        if active.len() != tokens.len() {
            return Err(Error::Contract("one token per active sequence".into()));
        }
        if self.position >= cfg.max_positions() {
            return Err(Error::Length {
                len: self.position + 1,
                max: cfg.max_positions(),
            });
        }
        for &s in active {
            if s >= self.mem_spans.len() || self.self_k[0][s].len() != self.position * d {
                return Err(Error::Contract(format!("sequence {s} is not at position {}", self.position)));
            }
        }
        let n = active.len();
        let table = model.tensor("tgt_embed");
        let pe = self.pe.row(self.position);
        let mut x = Vec::with_capacity(n * d);
        for &t in tokens {
            if t as usize >= cfg.vocab_size {
                return Err(Error::Contract(format!("token id {t} outside the vocabulary")));
            }
            x.extend(table.row(t as usize).iter().zip(pe).map(|(e, p)| e + p));
        }
        for l in 0..cfg.n_layers {
            // Masked self-attention over the cached prefix.
            let sp = format!("dec.{l}.self_attn");
            let q = project(&x, n, model.tensor(&format!("{sp}.w_q")));
            let k = project(&x, n, model.tensor(&format!("{sp}.w_k")));
            let v = project(&x, n, model.tensor(&format!("{sp}.w_v")));
            let mut a = vec![0.0f32; n * d];
            for (i, &s) in active.iter().enumerate() {
                self.self_k[l][s].extend_from_slice(&k[i * d..(i + 1) * d]);
                self.self_v[l][s].extend_from_slice(&v[i * d..(i + 1) * d]);
                let view = AttnView {
                    q: &q[i * d..(i + 1) * d],
                    k: &self.self_k[l][s],
                    v: &self.self_v[l][s],
                    key_pad: None,
                };
                ops::attend(view, d, cfg.n_heads, true, &mut a[i * d..(i + 1) * d])?;
            }
            let z = project(&a, n, model.tensor(&format!("{sp}.w_o")));
            add_norm(model, &format!("dec.{l}.ln1"), &mut x, &z);

            // Cross-attention to the fixed memory.
            let cp = format!("dec.{l}.cross_attn");
            let q = project(&x, n, model.tensor(&format!("{cp}.w_q")));
            let mut a = vec![0.0f32; n * d];
            for (i, &s) in active.iter().enumerate() {
                let (start, len) = self.mem_spans[s];
                let pad = &self.mem_pad[start..start + len];
                let view = AttnView {
                    q: &q[i * d..(i + 1) * d],
                    k: &self.cross_k[l][start * d..(start + len) * d],
                    v: &self.cross_v[l][start * d..(start + len) * d],
                    key_pad: pad.iter().any(|&m| m).then_some(pad),
                };
                ops::attend(view, d, cfg.n_heads, false, &mut a[i * d..(i + 1) * d])?;
            }
            let z = project(&a, n, model.tensor(&format!("{cp}.w_o")));
            add_norm(model, &format!("dec.{l}.ln2"), &mut x, &z);

            let fp = format!("dec.{l}.ffn");
            let mut h = project(&x, n, model.tensor(&format!("{fp}.w1")));
            for v in h.iter_mut() {
                *v = ops::gelu(*v);
            }
            let f = project(&h, n, model.tensor(&format!("{fp}.w2")));
            add_norm(model, &format!("dec.{l}.ln3"), &mut x, &f);
        }
        let mut logits = project(&x, n, model.tensor("generator.weight"));
        let bias = model.tensor("generator.bias").data();
        for row in logits.chunks_mut(cfg.vocab_size) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(crate::tensor::TensorError::NonFinite { op: "decoder step" }.into());
        }
        self.position += 1;
        Ok(Tensor::new(vec![n, cfg.vocab_size], logits)?)
    }
}
