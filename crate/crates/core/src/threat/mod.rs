//! Adversary probes against model-bound memories: a learned linear adapter
//! between encoders, and quantization or noise applied to the memory.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Batch, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{check_compatible, greedy_decode_batch, score_pair, MetricsRow};
use crate::model::{encode, Memory, ModelParams};
use crate::tensor::kernels::{gemm, Layout};
use crate::tensor::Tensor;

/// Affine map applied to every memory row: `h' = h·weight + bias`, so
/// `weight` is the transpose of the column-vector matrix `W` in `W·h + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub weight: Tensor,
    pub bias: Tensor,
    pub lambda: f64,
    pub source: String,
    pub target: String,
    pub n_train_pairs: usize,
}

impl Adapter {
    pub fn identity(d: usize) -> Self {
        let mut w = Tensor::zeros(&[d, d]);
        for i in 0..d {
            w.data_mut()[i * d + i] = 1.0;
        }
        Self {
            weight: w,
            bias: Tensor::zeros(&[d]),
            lambda: 0.0,
            source: String::new(),
            target: String::new(),
            n_train_pairs: 0,
        }
    }

    pub fn d_model(&self) -> usize {
        self.bias.numel()
    }

    pub fn apply(&self, memory: &Memory) -> Result<Memory> {
        let d = self.d_model();
        if memory.values.cols() != d {
            return Err(Error::Contract(format!(
                "adapter of width {d} applied to memory of width {}",
                memory.values.cols()
            )));
        }
        let n = memory.values.rows();
        let mut out = gemm(memory.values.data(), Layout::Normal, self.weight.data(), Layout::Normal, n, d, d);
        for row in out.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(Memory {
            values: Tensor::new(vec![n, d], out)?,
            src_pad_mask: memory.src_pad_mask.clone(),
        })
    }
}

/// Closed-form ridge regression from `source` rows to `target` rows over
/// every non-pad position: minimises `Σ‖h_a·Wᵀ + b − h_b‖² + λ‖W‖²`, with the
/// bias left unpenalised.
pub fn fit_linear_adapter(source: &[Memory], target: &[Memory], lambda: f64) -> Result<Adapter> {
    if source.len() != target.len() {
        return Err(Error::Contract("source and target memory counts differ".into()));
    }
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Config(format!("ridge λ must be finite and non-negative, got {lambda}")));
    }
    let d = source.first().map_or(0, |m| m.values.cols());
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (a, b) in source.iter().zip(target) {
        if a.values.shape() != b.values.shape() || a.src_pad_mask != b.src_pad_mask || a.values.cols() != d {
            return Err(Error::Contract("paired memories disagree in shape or mask".into()));
        }
        for r in 0..a.values.rows() {
            if a.src_pad_mask[r] {
                continue;
            }
            xs.extend(a.values.row(r).iter().map(|&v| f64::from(v)));
            xs.push(1.0);
            ys.extend(b.values.row(r).iter().map(|&v| f64::from(v)));
            n += 1;
        }
    }
    if d == 0 || n < d + 1 {
        return Err(Error::Contract(format!("{n} token rows cannot determine a {d}-wide adapter")));
    }
    let x = DMatrix::from_row_slice(n, d + 1, &xs);
    let y = DMatrix::from_row_slice(n, d, &ys);
    let mut gram = x.transpose() * &x;
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let rhs = x.transpose() * y;
    let chol = gram.cholesky().ok_or_else(|| {
        Error::Regularization(format!("normal equations are singular at λ={lambda}; use a positive ridge"))
    })?;
    let sol = chol.solve(&rhs);
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Regularization(format!("ill-conditioned solve at λ={lambda}")));
    }
    let weight: Vec<f32> = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| sol[(i, j)] as f32).collect();
    let bias: Vec<f32> = (0..d).map(|j| sol[(d, j)] as f32).collect();
    Ok(Adapter {
        weight: Tensor::new(vec![d, d], weight)?,
        bias: Tensor::new(vec![d], bias)?,
        lambda,
        source: String::new(),
        target: String::new(),
        n_train_pairs: source.len(),
    })
}

/// Encoder `a` produces memories, the adapter maps them, decoder `b` decodes.
pub fn adapter_cross_decode(
    (enc_name, encoder): (&str, &ModelParams),
    adapter: &Adapter,
    (dec_name, decoder): (&str, &ModelParams),
    batches: &[Batch],
    vocab: &Vocabulary,
) -> Result<MetricsRow> {
    check_compatible(encoder, decoder)?;
    let mut hyps: Vec<Vec<TokenId>> = Vec::new();
    for b in batches {
        let mems = encode(encoder, b, None)?
            .iter()
            .map(|m| adapter.apply(m))
            .collect::<Result<Vec<_>>>()?;
        hyps.extend(greedy_decode_batch(decoder, &mems, decoder.config().t_max)?.into_iter().map(|r| r.ids));
    }
    score_pair(enc_name, dec_name, &hyps, batches, vocab)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Perturbation {
    Quantize { bits: u32 },
    Gaussian { sigma: f64, seed: u64 },
}

/// Symmetric uniform quantisation of one tensor, dequantised back to floats.
/// Returns the values and the step size.
pub fn quantize_symmetric(values: &[f32], bits: u32) -> Result<(Vec<f32>, f32)> {
    if !(2..=16).contains(&bits) {
        return Err(Error::Config(format!("quantisation bits {bits} outside [2, 16]")));
    }
    let max = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return Ok((values.to_vec(), 0.0));
    }
    let levels = ((1u32 << (bits - 1)) - 1) as f32;
    let scale = max / levels;
    let out = values
        .iter()
        .map(|&v| (v / scale).round().clamp(-levels, levels) * scale)
        .collect();
    Ok((out, scale))
}

pub fn perturb_latent(memory: &Memory, mode: Perturbation) -> Result<Memory> {
    let data = match mode {
        Perturbation::Quantize { bits } => quantize_symmetric(memory.values.data(), bits)?.0,
        Perturbation::Gaussian { sigma, seed } => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::Config(format!("noise σ must be finite and non-negative, got {sigma}")));
            }
            if sigma == 0.0 {
                memory.values.data().to_vec()
            } else {
                let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                memory
                    .values
                    .data()
                    .iter()
                    .map(|&v| (f64::from(v) + normal.sample(&mut rng)) as f32)
                    .collect()
            }
        }
    };
    Ok(Memory {
        values: Tensor::new(memory.values.shape().to_vec(), data)?,
        src_pad_mask: memory.src_pad_mask.clone(),
    })
}

/// Self-decoding with perturbed memories. Gaussian seeds are offset by the
/// sequence index so each memory gets its own noise draw.
pub fn perturbed_self_decode(
    (name, model): (&str, &ModelParams),
    mode: Perturbation,
    batches: &[Batch],
    vocab: &Vocabulary,
) -> Result<MetricsRow> {
    let mut hyps: Vec<Vec<TokenId>> = Vec::new();
    let mut idx = 0u64;
    for b in batches {
        let mut mems = Vec::with_capacity(b.len());
        for m in encode(model, b, None)? {
            let m_mode = match mode {
                Perturbation::Gaussian { sigma, seed } => Perturbation::Gaussian {
                    sigma,
                    seed: seed.wrapping_add(idx),
                },
                q => q,
            };
            mems.push(perturb_latent(&m, m_mode)?);
            idx += 1;
        }
        hyps.extend(greedy_decode_batch(model, &mems, model.config().t_max)?.into_iter().map(|r| r.ids));
    }
    score_pair(name, name, &hyps, batches, vocab)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub perturbation: Perturbation,
    pub metrics: MetricsRow,
}

/// Self-decode accuracy for each bit width, in the order given.
pub fn quantization_sweep(
    model: (&str, &ModelParams),
    bits: &[u32],
    batches: &[Batch],
    vocab: &Vocabulary,
) -> Result<Vec<SweepPoint>> {
    bits.iter()
        .map(|&b| {
            let p = Perturbation::Quantize { bits: b };
            Ok(SweepPoint {
                perturbation: p,
                metrics: perturbed_self_decode(model, p, batches, vocab)?,
            })
        })
        .collect()
}

/// True when token accuracy never rises as the bit width drops.
pub fn is_non_increasing_in_bits(points: &[SweepPoint]) -> bool {
    let mut v: Vec<(u32, f64)> = points
        .iter()
        .filter_map(|p| match p.perturbation {
            Perturbation::Quantize { bits } => Some((bits, p.metrics.token_pct)),
            Perturbation::Gaussian { .. } => None,
        })
        .collect();
    v.sort_by_key(|e| std::cmp::Reverse(e.0));
    v.windows(2).all(|w| w[1].1 <= w[0].1)
}
