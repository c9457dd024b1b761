use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// RNG stream used for weight initialisation; dropout and shuffling use
/// their own streams of the same seed (see the trainer).
pub const INIT_STREAM: u64 = 0;

/// Named parameter tensors of one model, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: IndexMap<String, Tensor>,
}

/// Xavier-uniform bound for a `fan_in × fan_out` matrix.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f32 {
    (6.0 / (fan_in + fan_out) as f64).sqrt() as f32
}

/// `1/√fan_in`, the default bound of a framework linear layer.
pub fn fan_in_bound(fan_in: usize) -> f32 {
    (1.0 / (fan_in as f64).sqrt()) as f32
}

/// Uniform init bound for the matrix `name` of shape `fan_in × fan_out`.
/// Q, K and V share the bound of one fused `d × 3d` Xavier projection;
/// every other matrix (W_O, FFN, generator) uses `1/√fan_in`.
pub fn init_bound(name: &str, fan_in: usize, fan_out: usize) -> f32 {
    if [".w_q", ".w_k", ".w_v"].iter().any(|s| name.ends_with(s)) {
        xavier_bound(fan_in, 3 * fan_out)
    } else {
        fan_in_bound(fan_in)
    }
}

/// Deterministic initialisation with the usual framework layer defaults:
/// standard-normal embedding tables, uniform matrices bounded by
/// [`init_bound`], zero biases and unit LayerNorm gains. Draws happen in
/// manifest order from one seeded stream.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let mut tensors = IndexMap::new();
    for (name, shape) in config.parameter_shapes() {
        let n: usize = shape.iter().product();
        let t = if name.ends_with(".gain") {
            Tensor::full(&shape, 1.0)
        } else if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else if name.ends_with("_embed") {
            Tensor::new(shape, (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())?
        } else {
            let bound = init_bound(&name, shape[0], shape[1]);
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())?
        };
        tensors.insert(name, t);
    }
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

impl ModelParams {
    /// Assembles a model from named tensors, checking names and shapes
    /// against the config's manifest.
    pub fn from_tensors(config: ModelConfig, tensors: IndexMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let want = config.parameter_shapes();
        if want.len() != tensors.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                want.len(),
                tensors.len()
            )));
        }
        for ((wn, ws), (n, t)) in want.iter().zip(&tensors) {
            if wn != n || ws.as_slice() != t.shape() {
                return Err(Error::Contract(format!(
                    "parameter {n} {:?} does not match manifest entry {wn} {ws:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Contract(format!("parameter {n} holds non-finite values")));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub(crate) fn tensor(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// All values concatenated in manifest order.
    pub fn flatten(&self) -> Tensor {
        let data: Vec<f32> = self.tensors.values().flat_map(|t| t.data().iter().copied()).collect();
        let n = data.len();
        Tensor::new(vec![n], data).expect("flat length")
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn with_flat(&self, flat: &Tensor) -> Result<Self> {
        if flat.numel() != self.num_parameters() {
            return Err(Error::Contract("flat parameter vector has the wrong length".into()));
        }
        let mut out = self.clone();
        let mut off = 0;
        for t in out.tensors.values_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat.data()[off..off + n]);
            off += n;
        }
        Ok(out)
    }

    /// Registers every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundParams> {
        let mut vars = IndexMap::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), g.leaf(t.clone(), trainable)?);
        }
        Ok(BoundParams { vars })
    }
}

/// Graph handles for a model's parameters.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let a = init_model(&tiny(), 111).unwrap();
        assert_eq!(a, init_model(&tiny(), 111).unwrap());
        assert_ne!(a.flatten(), init_model(&tiny(), 222).unwrap().flatten());
    }

    #[test]
    fn init_respects_xavier_bounds_and_constants() {
        let m = init_model(&ModelConfig::default(), 7).unwrap();
        for (name, t) in m.iter() {
            if name.ends_with(".gain") {
                assert!(t.data().iter().all(|&v| v == 1.0));
            } else if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else if name.ends_with("_embed") {
                let n = t.numel() as f64;
                let mean = t.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
                let var = t.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
                assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.03, "{name}: {mean} {var}");
            } else {
                let (fan_in, fan_out) = (t.shape()[0], t.shape()[1]);
                let xavier = (6.0f64 / (fan_in + fan_out) as f64).sqrt() as f32;
                let own = if name.contains(".w_q") || name.contains(".w_k") || name.contains(".w_v") {
                    (6.0f64 / (4 * fan_out) as f64).sqrt() as f32
                } else {
                    1.0 / (fan_in as f32).sqrt()
                };
                assert!(own <= xavier, "{name}");
                let max = t.data().iter().fold(0f32, |m, v| m.max(v.abs()));
                assert!(max <= own && max > 0.95 * own, "{name}: {max} vs {own}");
            }
        }
    }

    #[test]
    fn flat_roundtrip() {
        let m = init_model(&tiny(), 1).unwrap();
        assert_eq!(m.with_flat(&m.flatten()).unwrap(), m);
    }

    #[test]
    fn from_tensors_rejects_wrong_manifest() {
        let m = init_model(&tiny(), 1).unwrap();
        let mut t: IndexMap<String, Tensor> = m.iter().map(|(k, v)| (k.to_owned(), v.clone())).collect();
        t.swap_remove("generator.bias");
        assert!(ModelParams::from_tensors(tiny(), t).is_err());
    }
}
