//! Weight-space distance and attention-map divergence between models.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, TokenId, Vocabulary, BOS};
use crate::error::{Error, Result};
use crate::eval::{check_compatible, csv_err, greedy_decode_batch};
use crate::model::{decode_traced, encode, encode_traced, ModelParams};
use crate::tensor::{Graph, Tensor, Var};

/// Additive smoothing applied to attention rows before KL.
pub const ATTN_EPS: f64 = 1e-9;

pub const PROBE_TEXT: &str = "secure message";

/// `√Σ_p ‖p_a − p_b‖²` over every parameter, accumulated in f64.
pub fn weight_l2(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    let names_a: Vec<_> = a.iter().map(|(n, t)| (n, t.shape())).collect();
    let names_b: Vec<_> = b.iter().map(|(n, t)| (n, t.shape())).collect();
    if names_a != names_b {
        return Err(Error::Contract("models have different parameter manifests".into()));
    }
    let mut acc = 0.0f64;
    for ((_, ta), (_, tb)) in a.iter().zip(b.iter()) {
        for (x, y) in ta.data().iter().zip(tb.data()) {
            let d = f64::from(*x) - f64::from(*y);
            acc += d * d;
        }
    }
    Ok(acc.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSite {
    EncoderSelfL0,
    DecoderSelfFinalStep,
    DecoderCross,
}

impl std::str::FromStr for AttentionSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder_self_l0" => Ok(Self::EncoderSelfL0),
            "decoder_self_final_step" => Ok(Self::DecoderSelfFinalStep),
            "decoder_cross" => Ok(Self::DecoderCross),
            other => Err(Error::Contract(format!("unknown attention site {other:?}"))),
        }
    }
}

impl AttentionSite {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::EncoderSelfL0 => "encoder_self_l0",
            Self::DecoderSelfFinalStep => "decoder_self_final_step",
            Self::DecoderCross => "decoder_cross",
        }
    }
}

/// Head-averaged layer-0 attention maps, one per input sequence, cropped to
/// the true sequence lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionCapture {
    pub site: AttentionSite,
    pub maps: Vec<Tensor>,
    /// Source ids of each sequence, used to pair captures across models.
    pub inputs: Vec<Vec<TokenId>>,
    /// For decoder sites, the length of the greedy prefix the maps were taken on.
    pub prefix_lens: Option<Vec<usize>>,
}

/// Mean over heads of one segment's `heads × q × k` probabilities, keeping
/// the leading `rows × cols` block.
fn head_mean(probs: &[f32], heads: usize, q: usize, k: usize, rows: usize, cols: usize) -> Result<Tensor> {
    let mut out = vec![0.0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let s: f32 = (0..heads).map(|h| probs[(h * q + i) * k + j]).sum();
            out[i * cols + j] = s / heads as f32;
        }
    }
    Ok(Tensor::new(vec![rows, cols], out)?)
}

fn collect_maps(g: &Graph, node: Var, dims: &[(usize, usize)]) -> Result<Vec<Tensor>> {
    let (layout, probs) = g
        .attention_probs(node)
        .ok_or_else(|| Error::Contract("node is not an attention node".into()))?;
    layout
        .segments
        .iter()
        .zip(probs)
        .zip(dims)
        .map(|((seg, p), &(rows, cols))| head_mean(p, layout.n_heads, seg.q_len, seg.k_len, rows, cols))
        .collect()
}

/// Captures `site` with one model acting as both encoder and decoder.
pub fn capture_attention(model: &ModelParams, batch: &Batch, site: AttentionSite) -> Result<AttentionCapture> {
    capture_attention_pair(model, model, batch, site)
}

/// Captures `site` when `decoder` reads memories produced by `encoder`.
/// Decoder sites are taken on the prefix fed at the final greedy step.
pub fn capture_attention_pair(
    encoder: &ModelParams,
    decoder: &ModelParams,
    batch: &Batch,
    site: AttentionSite,
) -> Result<AttentionCapture> {
    let inputs: Vec<Vec<TokenId>> = (0..batch.len()).map(|i| batch.sequence(i).to_vec()).collect();
    match site {
        AttentionSite::EncoderSelfL0 => {
            let (g, trace, _) = encode_traced(encoder, batch, None)?;
            let dims: Vec<_> = batch.lengths.iter().map(|&n| (n, n)).collect();
            Ok(AttentionCapture {
                site,
                maps: collect_maps(&g, trace.self_attn[0], &dims)?,
                inputs,
                prefix_lens: None,
            })
        }
        AttentionSite::DecoderSelfFinalStep | AttentionSite::DecoderCross => {
            check_compatible(encoder, decoder)?;
            let memories = encode(encoder, batch, None)?;
            let t_max = decoder.config().t_max;
            let prefixes: Vec<Vec<TokenId>> = greedy_decode_batch(decoder, &memories, t_max)?
                .into_iter()
                .map(|r| {
                    let mut p = vec![BOS];
                    p.extend_from_slice(&r.ids);
                    p.truncate(t_max);
                    p
                })
                .collect();
            let views: Vec<&[TokenId]> = prefixes.iter().map(Vec::as_slice).collect();
            let (g, trace, _) = decode_traced(decoder, &views, &memories, None)?;
            let (node, dims): (Var, Vec<_>) = if site == AttentionSite::DecoderCross {
                (
                    trace.cross_attn[0],
                    prefixes.iter().zip(&batch.lengths).map(|(p, &n)| (p.len(), n)).collect(),
                )
            } else {
                (trace.self_attn[0], prefixes.iter().map(|p| (p.len(), p.len())).collect())
            };
            Ok(AttentionCapture {
                site,
                maps: collect_maps(&g, node, &dims)?,
                inputs,
                prefix_lens: Some(prefixes.iter().map(Vec::len).collect()),
            })
        }
    }
}

fn check_paired(a: &AttentionCapture, b: &AttentionCapture) -> Result<()> {
    if a.site != b.site || a.inputs != b.inputs || a.maps.len() != b.maps.len() {
        return Err(Error::Contract("captures were taken on different inputs or sites".into()));
    }
    for (x, y) in a.maps.iter().zip(&b.maps) {
        if x.shape() != y.shape() {
            return Err(Error::Contract(format!(
                "attention maps of shapes {:?} and {:?} cannot be compared",
                x.shape(),
                y.shape()
            )));
        }
    }
    Ok(())
}

/// A row with `ε` added to every entry and renormalised, in f64.
pub fn smooth_row(row: &[f32]) -> Vec<f64> {
    let sum: f64 = row.iter().map(|&v| f64::from(v) + ATTN_EPS).sum();
    row.iter().map(|&v| (f64::from(v) + ATTN_EPS) / sum).collect()
}

/// `Σ_k p_k ln(p_k / q_k)` of two already-normalised rows.
pub fn kl_rows(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 }).sum()
}

/// Mean row-wise KL(a‖b) over all query rows of all sequences, after
/// ε-smoothing both operands.
pub fn attn_kl(a: &AttentionCapture, b: &AttentionCapture) -> Result<f64> {
    check_paired(a, b)?;
    let (mut total, mut rows) = (0.0f64, 0usize);
    for (x, y) in a.maps.iter().zip(&b.maps) {
        for r in 0..x.rows() {
            total += kl_rows(&smooth_row(x.row(r)), &smooth_row(y.row(r)));
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(Error::Contract("no attention rows to compare".into()));
    }
    Ok(total / rows as f64)
}

/// Cosine similarity of two flattened maps, in f64.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Per-sequence cosine of the flattened maps, averaged over sequences.
pub fn attn_cosine(a: &AttentionCapture, b: &AttentionCapture) -> Result<f64> {
    check_paired(a, b)?;
    if a.maps.is_empty() {
        return Err(Error::Contract("no attention maps to compare".into()));
    }
    let s: f64 = a.maps.iter().zip(&b.maps).map(|(x, y)| cosine(x.data(), y.data())).sum();
    Ok(s / a.maps.len() as f64)
}

/// The fixed probe string followed by the shared evaluation batches.
pub fn probe_batches(eval_batches: &[Batch], vocab: &Vocabulary, max_len: usize) -> Result<Vec<Batch>> {
    let mut out = vec![Batch::from_strings(&[PROBE_TEXT.to_owned()], vocab, max_len)?];
    out.extend(eval_batches.iter().cloned());
    Ok(out)
}

/// Concatenates captures of the same site taken on consecutive batches.
pub fn concat_captures(parts: Vec<AttentionCapture>) -> Result<AttentionCapture> {
    let mut iter = parts.into_iter();
    let mut out = iter
        .next()
        .ok_or_else(|| Error::Contract("no captures to concatenate".into()))?;
    for p in iter {
        if p.site != out.site {
            return Err(Error::Contract("captures of different sites".into()));
        }
        out.maps.extend(p.maps);
        out.inputs.extend(p.inputs);
        match (&mut out.prefix_lens, p.prefix_lens) {
            (Some(a), Some(b)) => a.extend(b),
            (None, None) => {}
            _ => return Err(Error::Contract("mixed prefix information".into())),
        }
    }
    Ok(out)
}

/// One row per (sequence, query, key) cell.
#[derive(Debug, Serialize)]
struct GridCell {
    sequence: usize,
    query: usize,
    key: usize,
    prob: f32,
}

pub fn write_attention_csv(path: &Path, capture: &AttentionCapture) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for (s, m) in capture.maps.iter().enumerate() {
        let cols = m.cols();
        for (idx, &prob) in m.data().iter().enumerate() {
            w.serialize(GridCell {
                sequence: s,
                query: idx / cols,
                key: idx % cols,
                prob,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Divergence statistics of one model pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub model_a: String,
    pub model_b: String,
    pub weight_l2: f64,
    pub kl: f64,
    pub cosine: f64,
}

pub fn write_diagnostics_csv(path: &Path, rows: &[DiagnosticsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use approx::assert_abs_diff_eq;

    fn tiny(seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            t_max: 20,
            ..ModelConfig::default()
        };
        init_model(&cfg, seed).unwrap()
    }

    fn cap(rows: Vec<Vec<f32>>) -> AttentionCapture {
        let n = rows[0].len();
        let r = rows.len();
        AttentionCapture {
            site: AttentionSite::EncoderSelfL0,
            maps: vec![Tensor::new(vec![r, n], rows.concat()).unwrap()],
            inputs: vec![vec![1, 2]],
            prefix_lens: None,
        }
    }

    fn probe() -> Batch {
        let s: Vec<String> = ["secure message", "ab", "Hello, World!"].iter().map(|s| s.to_string()).collect();
        Batch::from_strings(&s, &Vocabulary::new(), 50).unwrap()
    }

    #[test]
    fn weight_l2_single_coordinate() {
        let mut a = tiny(1);
        a.get_mut("enc.0.ffn.w1").unwrap().data_mut()[5] = 0.25;
        let mut b = a.clone();
        b.get_mut("enc.0.ffn.w1").unwrap().data_mut()[5] = 3.25;
        assert_eq!(weight_l2(&a, &b).unwrap(), 3.0);
        assert_eq!(weight_l2(&a, &a.clone()).unwrap(), 0.0);
        let other = init_model(&ModelConfig { d_ff: 8, ..a.config().clone() }, 1).unwrap();
        assert!(weight_l2(&a, &other).is_err());
    }

    #[test]
    fn kl_hand_example() {
        let a = cap(vec![vec![0.5, 0.5]]);
        let b = cap(vec![vec![0.25, 0.75]]);
        let oracle = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert_abs_diff_eq!(attn_kl(&a, &b).unwrap(), oracle, epsilon = 1e-8);
        assert_abs_diff_eq!(attn_kl(&a, &b).unwrap(), 0.1438, epsilon = 1e-4);
        assert_eq!(attn_kl(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn cosine_examples() {
        let a = cap(vec![vec![1.0, 0.0]]);
        let b = cap(vec![vec![0.0, 1.0]]);
        assert_eq!(attn_cosine(&a, &b).unwrap(), 0.0);
        assert_abs_diff_eq!(attn_cosine(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mismatched_captures_are_rejected() {
        let a = cap(vec![vec![0.5, 0.5]]);
        let mut b = cap(vec![vec![0.5, 0.25, 0.25]]);
        assert!(attn_kl(&a, &b).is_err());
        b = cap(vec![vec![0.5, 0.5]]);
        b.site = AttentionSite::DecoderCross;
        assert!(attn_cosine(&a, &b).is_err());
        assert!("decoder".parse::<AttentionSite>().is_err());
    }

    #[test]
    fn encoder_maps_are_stochastic_and_cropped() {
        let b = probe();
        let c = capture_attention(&tiny(3), &b, AttentionSite::EncoderSelfL0).unwrap();
        for (m, &n) in c.maps.iter().zip(&b.lengths) {
            assert_eq!(m.shape(), &[n, n]);
            for r in 0..n {
                let s: f32 = m.row(r).iter().sum();
                assert!((s - 1.0).abs() <= 1e-5);
                assert!(m.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
        assert_eq!(c, capture_attention(&tiny(3), &b, AttentionSite::EncoderSelfL0).unwrap());
    }

    #[test]
    fn decoder_self_maps_are_causal() {
        let c = capture_attention(&tiny(3), &probe(), AttentionSite::DecoderSelfFinalStep).unwrap();
        let lens = c.prefix_lens.clone().unwrap();
        for (m, &p) in c.maps.iter().zip(&lens) {
            assert_eq!(m.shape(), &[p, p]);
            for i in 0..p {
                for j in i + 1..p {
                    assert_eq!(m.row(i)[j], 0.0);
                }
                assert!((m.row(i).iter().sum::<f32>() - 1.0).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn cross_maps_cover_the_source() {
        let b = probe();
        let c = capture_attention_pair(&tiny(3), &tiny(4), &b, AttentionSite::DecoderCross).unwrap();
        for ((m, &n), &p) in c.maps.iter().zip(&b.lengths).zip(c.prefix_lens.as_ref().unwrap()) {
            assert_eq!(m.shape(), &[p, n]);
        }
    }

    #[test]
    fn distinct_seeds_diverge_and_self_is_exact() {
        let b = probe();
        let a1 = capture_attention(&tiny(1), &b, AttentionSite::EncoderSelfL0).unwrap();
        let a2 = capture_attention(&tiny(2), &b, AttentionSite::EncoderSelfL0).unwrap();
        assert!(attn_kl(&a1, &a2).unwrap() > 0.0);
        assert!(attn_kl(&a1, &a1.clone()).unwrap().abs() <= 1e-12);
        assert!((attn_cosine(&a1, &a1.clone()).unwrap() - 1.0).abs() <= 1e-12);
    }
}
