use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::decode::{check_compatible, greedy_decode_batch};
use super::metrics::{mean_levsim, metric_exact, metric_token_acc};
use crate::data::{Batch, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{encode, Memory, ModelParams};

/// Scores of one ordered encoder→decoder pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub encoder: String,
    pub decoder: String,
    pub exact_pct: f64,
    pub token_pct: f64,
    pub levsim_pct: f64,
    #[serde(rename = "n")]
    pub n_samples: usize,
}

/// Worker pool sized by `MOBLE_THREADS` when set, else by rayon's default.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("MOBLE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Scores a decoder's outputs against the source batches.
pub fn score_pair(
    encoder: &str,
    decoder: &str,
    hyps: &[Vec<TokenId>],
    batches: &[Batch],
    vocab: &Vocabulary,
) -> Result<MetricsRow> {
    let refs: Vec<&[TokenId]> = batches
        .iter()
        .flat_map(|b| (0..b.len()).map(move |i| b.sequence(i)))
        .collect();
    let hyp_s: Vec<String> = hyps.iter().map(|h| vocab.detokenize(h)).collect();
    let ref_s: Vec<String> = refs.iter().map(|r| vocab.detokenize(&r[1.min(r.len())..])).collect();
    Ok(MetricsRow {
        encoder: encoder.to_owned(),
        decoder: decoder.to_owned(),
        exact_pct: metric_exact(&hyp_s, &ref_s)?,
        token_pct: metric_token_acc(hyps, &refs)?,
        levsim_pct: mean_levsim(&hyp_s, &ref_s)?,
        n_samples: hyps.len(),
    })
}

/// Every ordered pair (self pairs included) decoded on the same batches.
/// Memories are computed once per encoder and reused by every decoder.
pub fn pair_matrix(models: &[(&str, &ModelParams)], batches: &[Batch], vocab: &Vocabulary) -> Result<Vec<MetricsRow>> {
    if models.len() < 2 {
        return Err(Error::Contract("pair matrix needs at least two models".into()));
    }
    for (_, a) in models {
        for (_, b) in models {
            check_compatible(a, b)?;
        }
    }
    let pool = thread_pool()?;
    pool.install(|| {
        let memories: Vec<Vec<Vec<Memory>>> = models
            .par_iter()
            .map(|(_, m)| batches.iter().map(|b| encode(m, b, None)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        let pairs: Vec<(usize, usize)> = (0..models.len())
            .flat_map(|e| (0..models.len()).map(move |d| (e, d)))
            .collect();
        pairs
            .par_iter()
            .map(|&(e, d)| {
                let dec = models[d].1;
                let mut hyps = Vec::new();
                for mem in &memories[e] {
                    hyps.extend(
                        greedy_decode_batch(dec, mem, dec.config().t_max)?
                            .into_iter()
                            .map(|r| r.ids),
                    );
                }
                score_pair(models[e].0, models[d].0, &hyps, batches, vocab)
            })
            .collect()
    })
}

/// Mean token accuracy of self pairs minus that of cross pairs. Two ids are
/// the same key when `lineage` maps them to the same value (ids missing from
/// the map are their own lineage), so clones and same-seed retrains count as self.
pub fn binding_advantage(rows: &[MetricsRow], lineage: &HashMap<String, String>) -> Result<f64> {
    let key = |id: &str| lineage.get(id).map_or(id.to_owned(), Clone::clone);
    let (mut s, mut ns, mut c, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for r in rows {
        if key(&r.encoder) == key(&r.decoder) {
            s += r.token_pct;
            ns += 1;
        } else {
            c += r.token_pct;
            nc += 1;
        }
    }
    if ns == 0 || nc == 0 {
        return Err(Error::Contract("binding advantage needs both self and cross pairs".into()));
    }
    Ok(s / ns as f64 - c / nc as f64)
}

pub fn write_matrix_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Contract(format!("csv: {other:?}")),
    }
}
