//! Post-norm encoder–decoder forward pass on the tape.

use rand_chacha::ChaCha8Rng;

use super::{BoundParams, ModelConfig, ModelParams, LAYER_NORM_EPS};
use crate::data::{Batch, TokenId};
use crate::error::{Error, Result};
use crate::tensor::{dim_err, AttentionLayout, Graph, Segment, Tensor, TensorError, Var};

/// Fixed sinusoidal table: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `PE[pos, 2i+1] = cos(…)`.
pub fn sinusoidal_pe(t_len: usize, d_model: usize) -> Result<Tensor, TensorError> {
    if !d_model.is_multiple_of(2) {
        return Err(dim_err("sinusoidal_pe", format!("d_model {d_model} is odd")));
    }
    let mut data = vec![0.0f32; t_len * d_model];
    for pos in 0..t_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin() as f32;
            data[pos * d_model + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Tensor::new(vec![t_len, d_model], data)
}

/// Final encoder states of one sequence plus its key padding mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Memory {
    /// `T × d_model`.
    pub values: Tensor,
    /// True exactly at pad positions.
    pub src_pad_mask: Vec<bool>,
}

impl Memory {
    pub fn len(&self) -> usize {
        self.src_pad_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src_pad_mask.is_empty()
    }
}

/// Several sequences stacked row-wise.
#[derive(Clone, Debug, Default)]
pub(crate) struct Packed {
    pub ids: Vec<TokenId>,
    pub positions: Vec<usize>,
    /// `(first row, rows)` per sequence.
    pub spans: Vec<(usize, usize)>,
    pub key_pad: Vec<bool>,
}

impl Packed {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a [TokenId]>) -> Self {
        let mut p = Packed::default();
        for s in seqs {
            p.spans.push((p.ids.len(), s.len()));
            p.ids.extend_from_slice(s);
            p.positions.extend(0..s.len());
            p.key_pad.extend(std::iter::repeat_n(false, s.len()));
        }
        p
    }

    /// Every row keeps the batch width; pad positions are flagged.
    pub fn from_batch_padded(batch: &Batch) -> Self {
        let t = batch.seq_len();
        Packed {
            ids: batch.token_ids.clone(),
            positions: (0..batch.len()).flat_map(|_| 0..t).collect(),
            spans: (0..batch.len()).map(|i| (i * t, t)).collect(),
            key_pad: batch.pad_mask.clone(),
        }
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    fn max_span(&self) -> usize {
        self.spans.iter().map(|s| s.1).max().unwrap_or(0)
    }
}

/// Graph handles produced by the encoder stack.
#[derive(Clone, Debug)]
pub(crate) struct EncoderTrace {
    pub output: Var,
    pub self_attn: Vec<Var>,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderTrace {
    pub logits: Var,
    pub self_attn: Vec<Var>,
    pub cross_attn: Vec<Var>,
}

type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

fn dropout(g: &mut Graph, x: Var, p: f32, rng: &mut DropoutRng<'_>) -> Result<Var> {
    Ok(match rng {
        Some(r) => g.dropout(x, p, &mut **r)?,
        None => x,
    })
}

fn embed(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, table: &str, rows: &Packed) -> Result<Var> {
    let limit = cfg.max_positions();
    if let Some(&pos) = rows.positions.iter().max() {
        if pos >= limit {
            return Err(Error::Length { len: pos + 1, max: limit });
        }
    }
    let pe = sinusoidal_pe(limit, cfg.d_model)?;
    let d = cfg.d_model;
    let mut pe_rows = Vec::with_capacity(rows.rows() * d);
    for &pos in &rows.positions {
        pe_rows.extend_from_slice(pe.row(pos));
    }
    let e = g.embedding(p.var(table), &rows.ids)?;
    let pe = g.constant(Tensor::new(vec![rows.rows(), d], pe_rows)?)?;
    Ok(g.add(e, pe)?)
}

/// `(Concat_h softmax(Q_h K_hᵀ/√d_k) V_h) · W_O`; returns the projected output and the attention node.
fn attention_block(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    x_q: Var,
    x_kv: Var,
    layout: AttentionLayout,
) -> Result<(Var, Var)> {
    let q = g.matmul(x_q, p.var(&format!("{prefix}.w_q")))?;
    let k = g.matmul(x_kv, p.var(&format!("{prefix}.w_k")))?;
    let v = g.matmul(x_kv, p.var(&format!("{prefix}.w_v")))?;
    let a = g.attention(q, k, v, layout)?;
    let z = g.matmul(a, p.var(&format!("{prefix}.w_o")))?;
    Ok((z, a))
}

fn feed_forward(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let h = g.matmul(x, p.var(&format!("{prefix}.w1")))?;
    let h = g.gelu(h)?;
    Ok(g.matmul(h, p.var(&format!("{prefix}.w2")))?)
}

/// `LN(x + Drop(sublayer))`.
fn add_norm(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    sub: Var,
    rate: f32,
    rng: &mut DropoutRng<'_>,
) -> Result<Var> {
    let s = dropout(g, sub, rate, rng)?;
    let y = g.add(x, s)?;
    Ok(g.layer_norm(
        y,
        p.var(&format!("{prefix}.gain")),
        p.var(&format!("{prefix}.bias")),
        LAYER_NORM_EPS,
    )?)
}

fn self_layout(rows: &Packed, n_heads: usize, causal: bool) -> AttentionLayout {
    AttentionLayout {
        n_heads,
        causal,
        segments: rows
            .spans
            .iter()
            .map(|&(s, n)| Segment {
                q_start: s,
                q_len: n,
                k_start: s,
                k_len: n,
            })
            .collect(),
        key_pad: rows.key_pad.iter().any(|&m| m).then(|| rows.key_pad.clone()),
    }
}

pub(crate) fn encoder_graph(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    src: &Packed,
    mut rng: DropoutRng<'_>,
) -> Result<EncoderTrace> {
    let mut x = embed(g, p, cfg, "src_embed", src)?;
    x = dropout(g, x, cfg.dropout, &mut rng)?;
    let mut self_attn = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let layout = self_layout(src, cfg.n_heads, false);
        let (z, a) = attention_block(g, p, &format!("enc.{l}.self_attn"), x, x, layout)?;
        self_attn.push(a);
        x = add_norm(g, p, &format!("enc.{l}.ln1"), x, z, cfg.dropout, &mut rng)?;
        let f = feed_forward(g, p, &format!("enc.{l}.ffn"), x)?;
        x = add_norm(g, p, &format!("enc.{l}.ln2"), x, f, cfg.dropout, &mut rng)?;
    }
    Ok(EncoderTrace { output: x, self_attn })
}

pub(crate) fn decoder_graph(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    tgt: &Packed,
    memory: Var,
    mem_rows: &Packed,
    mut rng: DropoutRng<'_>,
) -> Result<DecoderTrace> {
    if tgt.spans.len() != mem_rows.spans.len() {
        return Err(Error::Contract(format!(
            "{} target sequences but {} memories",
            tgt.spans.len(),
            mem_rows.spans.len()
        )));
    }
    let mut y = embed(g, p, cfg, "tgt_embed", tgt)?;
    y = dropout(g, y, cfg.dropout, &mut rng)?;
    let cross = AttentionLayout {
        n_heads: cfg.n_heads,
        causal: false,
        segments: tgt
            .spans
            .iter()
            .zip(&mem_rows.spans)
            .map(|(&(qs, qn), &(ks, kn))| Segment {
                q_start: qs,
                q_len: qn,
                k_start: ks,
                k_len: kn,
            })
            .collect(),
        key_pad: mem_rows.key_pad.iter().any(|&m| m).then(|| mem_rows.key_pad.clone()),
    };
    let mut self_attn = Vec::with_capacity(cfg.n_layers);
    let mut cross_attn = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let layout = self_layout(tgt, cfg.n_heads, true);
        let (z, a) = attention_block(g, p, &format!("dec.{l}.self_attn"), y, y, layout)?;
        self_attn.push(a);
        y = add_norm(g, p, &format!("dec.{l}.ln1"), y, z, cfg.dropout, &mut rng)?;
        let (z, a) = attention_block(g, p, &format!("dec.{l}.cross_attn"), y, memory, cross.clone())?;
        cross_attn.push(a);
        y = add_norm(g, p, &format!("dec.{l}.ln2"), y, z, cfg.dropout, &mut rng)?;
        let f = feed_forward(g, p, &format!("dec.{l}.ffn"), y)?;
        y = add_norm(g, p, &format!("dec.{l}.ln3"), y, f, cfg.dropout, &mut rng)?;
    }
    let logits = g.matmul(y, p.var("generator.weight"))?;
    let logits = g.add_row_bias(logits, p.var("generator.bias"))?;
    Ok(DecoderTrace {
        logits,
        self_attn,
        cross_attn,
    })
}

fn check_batch(model: &ModelParams, batch: &Batch) -> Result<()> {
    let max = model.config().max_positions();
    if batch.seq_len() > max {
        return Err(Error::Length {
            len: batch.seq_len(),
            max,
        });
    }
    if let Some(&bad) = batch.token_ids.iter().find(|&&t| t as usize >= model.config().vocab_size) {
        return Err(Error::Contract(format!("token id {bad} outside the vocabulary")));
    }
    Ok(())
}

/// Runs the encoder over a padded batch and keeps the graph for inspection.
pub(crate) fn encode_traced(
    model: &ModelParams,
    batch: &Batch,
    rng: DropoutRng<'_>,
) -> Result<(Graph, EncoderTrace, Packed)> {
    check_batch(model, batch)?;
    let mut g = Graph::new();
    let p = model.bind(&mut g, false)?;
    let rows = Packed::from_batch_padded(batch);
    let trace = encoder_graph(&mut g, &p, model.config(), &rows, rng)?;
    Ok((g, trace, rows))
}

/// Final encoder states for every sequence of `batch`. Dropout is active only
/// when an RNG is supplied.
pub fn encode(model: &ModelParams, batch: &Batch, rng: DropoutRng<'_>) -> Result<Vec<Memory>> {
    let (g, trace, rows) = encode_traced(model, batch, rng)?;
    let out = g.value(trace.output);
    let d = model.config().d_model;
    rows.spans
        .iter()
        .map(|&(s, n)| {
            Ok(Memory {
                values: Tensor::new(vec![n, d], out.data()[s * d..(s + n) * d].to_vec())?,
                src_pad_mask: rows.key_pad[s..s + n].to_vec(),
            })
        })
        .collect()
}

pub(crate) fn stack_memories(memories: &[Memory], d_model: usize) -> Result<(Tensor, Packed)> {
    let mut data = Vec::new();
    let mut rows = Packed::default();
    for m in memories {
        if m.values.shape().len() != 2 || m.values.cols() != d_model {
            return Err(dim_err(
                "memory",
                format!("memory of shape {:?} for a d_model={d_model} decoder", m.values.shape()),
            )
            .into());
        }
        if m.values.rows() != m.src_pad_mask.len() {
            return Err(Error::Contract("memory rows and pad mask disagree".into()));
        }
        rows.spans.push((rows.key_pad.len(), m.len()));
        rows.key_pad.extend_from_slice(&m.src_pad_mask);
        data.extend_from_slice(m.values.data());
    }
    let n = rows.key_pad.len();
    Ok((Tensor::new(vec![n, d_model], data)?, rows))
}

/// Teacher-forced decoder pass over unpadded prefixes against fixed memories.
pub(crate) fn decode_traced(
    model: &ModelParams,
    prefixes: &[&[TokenId]],
    memories: &[Memory],
    rng: DropoutRng<'_>,
) -> Result<(Graph, DecoderTrace, Packed)> {
    let cfg = model.config();
    let (mem, mem_rows) = stack_memories(memories, cfg.d_model)?;
    let tgt = Packed::from_sequences(prefixes.iter().copied());
    if tgt.max_span() > cfg.max_positions() {
        return Err(Error::Length {
            len: tgt.max_span(),
            max: cfg.max_positions(),
        });
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g, false)?;
    let mem = g.constant(mem)?;
    let trace = decoder_graph(&mut g, &p, cfg, &tgt, mem, &mem_rows, rng)?;
    Ok((g, trace, tgt))
}

/// Logits (`T_i × |V|`) for each prefix in `prefixes`, decoded against the
/// matching memory. Memories may come from any encoder with the same width.
pub fn decoder_forward(
    model: &ModelParams,
    prefixes: &Batch,
    memories: &[Memory],
    rng: DropoutRng<'_>,
) -> Result<Vec<Tensor>> {
    let seqs: Vec<&[TokenId]> = (0..prefixes.len()).map(|i| prefixes.sequence(i)).collect();
    let (g, trace, tgt) = decode_traced(model, &seqs, memories, rng)?;
    let logits = g.value(trace.logits);
    let v = logits.cols();
    tgt.spans
        .iter()
        .map(|&(s, n)| Ok(Tensor::new(vec![n, v], logits.data()[s * v..(s + n) * v].to_vec())?))
        .collect()
}
