use serde::{Deserialize, Serialize};

use crate::data::VOCAB_SIZE;
use crate::error::{Error, Result};

/// Shape hyperparameters of the encoder–decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f32,
    pub t_max: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_layers: 4,
            n_heads: 4,
            d_ff: 1024,
            dropout: 0.1,
            t_max: 50,
            vocab_size: VOCAB_SIZE,
        }
    }
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Longest sequence the positional table covers.
    pub fn max_positions(&self) -> usize {
        self.t_max + 2
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if !self.d_model.is_multiple_of(2) {
            return fail(format!("d_model {} must be even", self.d_model));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.t_max < 2 {
            return fail(format!("t_max {} below 2", self.t_max));
        }
        if self.vocab_size != VOCAB_SIZE {
            return fail(format!("vocab_size {} differs from {VOCAB_SIZE}", self.vocab_size));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return fail("n_layers and d_ff must be positive".into());
        }
        Ok(())
    }

    /// Parameter names and shapes in manifest order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, ff, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![
            ("src_embed".to_owned(), vec![v, d]),
            ("tgt_embed".to_owned(), vec![v, d]),
        ];
        let attn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            for w in ["w_q", "w_k", "w_v", "w_o"] {
                out.push((format!("{prefix}.{w}"), vec![d, d]));
            }
        };
        let norm = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            out.push((format!("{prefix}.gain"), vec![d]));
            out.push((format!("{prefix}.bias"), vec![d]));
        };
        let ffn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            out.push((format!("{prefix}.w1"), vec![d, ff]));
            out.push((format!("{prefix}.w2"), vec![ff, d]));
        };
        for l in 0..self.n_layers {
            attn(&mut out, &format!("enc.{l}.self_attn"));
            norm(&mut out, &format!("enc.{l}.ln1"));
            ffn(&mut out, &format!("enc.{l}.ffn"));
            norm(&mut out, &format!("enc.{l}.ln2"));
        }
        for l in 0..self.n_layers {
            attn(&mut out, &format!("dec.{l}.self_attn"));
            norm(&mut out, &format!("dec.{l}.ln1"));
            attn(&mut out, &format!("dec.{l}.cross_attn"));
            norm(&mut out, &format!("dec.{l}.ln2"));
            ffn(&mut out, &format!("dec.{l}.ffn"));
            norm(&mut out, &format!("dec.{l}.ln3"));
        }
        out.push(("generator.weight".to_owned(), vec![d, v]));
        out.push(("generator.bias".to_owned(), vec![v]));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.d_k(), 64);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = ModelConfig::default();
        for bad in [
            ModelConfig { n_heads: 3, ..base.clone() },
            ModelConfig { dropout: 1.0, ..base.clone() },
            ModelConfig { t_max: 1, ..base.clone() },
            ModelConfig { vocab_size: 90, ..base.clone() },
            ModelConfig { n_layers: 0, ..base.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        let odd = ModelConfig { d_model: 9, n_heads: 3, ..base };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn parameter_count_of_default_model() {
        let n: usize = ModelConfig::default()
            .parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        // 2 embeddings + 4 encoder layers + 4 decoder layers + generator.
        let enc = 4 * 256 * 256 + 2 * 256 * 1024 + 4 * 256;
        let dec = 8 * 256 * 256 + 2 * 256 * 1024 + 6 * 256;
        assert_eq!(n, 2 * 86 * 256 + 4 * enc + 4 * dec + 256 * 86 + 86);
    }
}
