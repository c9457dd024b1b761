//! The five-model protocol: three seeds, an exact clone and a same-seed
//! retrain, followed by the pair matrix, diagnostics and adversary probes.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::{creator_stamp, load_checkpoint, save_checkpoint, Checkpoint};
use super::report::{
    config_hash, sha256_hex, AdapterReport, DiagnosticsEntry, MatrixEntry, ModelEntry, RunReport, ThreatSection,
};
use super::ExperimentConfig;
use crate::data::{generate_corpus, make_batches, read_corpus, write_corpus, Batch, Vocabulary};
use crate::diag::{
    attn_cosine, attn_kl, capture_attention, capture_attention_pair, concat_captures, probe_batches, weight_l2,
    write_attention_csv, write_diagnostics_csv, AttentionSite, DiagnosticsRow,
};
use crate::error::{Error, Result};
use crate::eval::{binding_advantage, pair_matrix, write_matrix_csv, MetricsRow};
use crate::model::{encode, init_model, ModelParams};
use crate::threat::{
    adapter_cross_decode, fit_linear_adapter, is_non_increasing_in_bits, perturbed_self_decode, quantization_sweep,
    Adapter, Perturbation, SweepPoint,
};
use crate::train::train;

pub const MODEL_IDS: [&str; 5] = ["M1", "M2", "M3", "M1_CLONE", "M1_SAMESEED"];

/// Pairs reported in the divergence table.
pub const DIAGNOSTIC_PAIRS: [(&str, &str); 5] = [
    ("M1", "M1_CLONE"),
    ("M1", "M1_SAMESEED"),
    ("M1", "M2"),
    ("M1", "M3"),
    ("M2", "M3"),
];

/// File layout of one run.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn train_corpus(&self) -> PathBuf {
        self.root.join("data/train.txt")
    }

    pub fn test_corpus(&self) -> PathBuf {
        self.root.join("data/test.txt")
    }

    pub fn model(&self, id: &str) -> PathBuf {
        self.root.join(format!("models/{id}.mobl"))
    }

    pub fn matrix_csv(&self) -> PathBuf {
        self.root.join("matrix.csv")
    }

    pub fn diagnostics_csv(&self) -> PathBuf {
        self.root.join("diagnostics.csv")
    }

    pub fn attention_dir(&self) -> PathBuf {
        self.root.join("attention")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

pub struct LoadedModel {
    pub id: String,
    pub ckpt: Checkpoint,
    pub file_sha256: String,
}

impl LoadedModel {
    pub fn params(&self) -> &ModelParams {
        &self.ckpt.params
    }

    pub fn config_hash(&self) -> Result<String> {
        let train = self
            .ckpt
            .meta
            .train
            .clone()
            .ok_or_else(|| Error::Contract(format!("{} has no training record", self.id)))?;
        config_hash(&self.ckpt.meta.model, &train)
    }

    pub fn lineage(&self) -> String {
        format!("seed-{}", self.ckpt.meta.seed)
    }
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub dir: RunDir,
    pub vocab: Vocabulary,
    /// Reuse checkpoints already present in the run directory when their
    /// metadata matches the configuration.
    pub resume: bool,
    pub device_label: Option<String>,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, root: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            dir: RunDir::new(root),
            vocab: Vocabulary::new(),
            resume: false,
            device_label: None,
        })
    }

    pub fn seed_of(&self, id: &str) -> Option<u64> {
        match id {
            "M1" | "M1_SAMESEED" => Some(self.cfg.seed_m1),
            "M2" => Some(self.cfg.seed_m2),
            "M3" => Some(self.cfg.seed_m3),
            _ => None,
        }
    }

    /// Generates both corpora and writes them under `data/`.
    pub fn generate_data(&self) -> Result<(Vec<String>, Vec<String>)> {
        let train = generate_corpus(self.cfg.train_corpus_seed, self.cfg.train_corpus(), &self.vocab)?;
        let test = generate_corpus(self.cfg.test_corpus_seed, self.cfg.test_corpus(), &self.vocab)?;
        write_corpus(&self.dir.train_corpus(), &train)?;
        write_corpus(&self.dir.test_corpus(), &test)?;
        Ok((train, test))
    }

    /// Reads the corpora of the run, generating them when absent.
    pub fn data(&self) -> Result<(Vec<String>, Vec<String>)> {
        if self.dir.train_corpus().exists() && self.dir.test_corpus().exists() {
            Ok((
                read_corpus(&self.dir.train_corpus(), &self.vocab)?,
                read_corpus(&self.dir.test_corpus(), &self.vocab)?,
            ))
        } else {
            self.generate_data()
        }
    }

    fn reusable(&self, path: &Path, seed: u64) -> Option<Checkpoint> {
        if !self.resume || !path.exists() {
            return None;
        }
        let ckpt = load_checkpoint(path).ok()?;
        let m = &ckpt.meta;
        let fits = m.seed == seed
            && m.model == self.cfg.model()
            && m.train.as_ref() == Some(&self.cfg.train(seed))
            && m.epoch_losses.len() == self.cfg.epochs
            && m.creator == creator_stamp();
        fits.then_some(ckpt)
    }

    /// Initialises from `seed`, trains on `corpus` and saves as `id`.
    pub fn train_model(&self, id: &str, seed: u64, corpus: &[String]) -> Result<Checkpoint> {
        let path = self.dir.model(id);
        if let Some(c) = self.reusable(&path, seed) {
            log::info!("{id}: reusing {}", path.display());
            return Ok(c);
        }
        let tcfg = self.cfg.train(seed);
        let mut model = init_model(&self.cfg.model(), seed)?;
        log::info!("{id}: training with seed {seed}");
        let trace = train(&mut model, corpus, &tcfg, &self.vocab)?;
        let ckpt = Checkpoint::new(model, seed, Some(tcfg), trace.epoch_losses);
        save_checkpoint(&path, &ckpt)?;
        Ok(ckpt)
    }

    /// Clones by copying the checkpoint file byte for byte.
    pub fn clone_model(&self, src: &str, dst: &str) -> Result<()> {
        let to = self.dir.model(dst);
        if let Some(dir) = to.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::copy(self.dir.model(src), to)?;
        Ok(())
    }

    pub fn load_model(&self, id: &str) -> Result<LoadedModel> {
        let bytes = fs::read(self.dir.model(id))?;
        Ok(LoadedModel {
            id: id.to_owned(),
            ckpt: Checkpoint::from_bytes(&bytes)?,
            file_sha256: sha256_hex(&bytes),
        })
    }

    pub fn load_models(&self, ids: &[&str]) -> Result<Vec<LoadedModel>> {
        ids.iter().map(|id| self.load_model(id)).collect()
    }

    /// The first `eval_batches` unshuffled test batches.
    pub fn eval_batches(&self, test: &[String]) -> Result<Vec<Batch>> {
        let mut b = make_batches(test, &self.vocab, self.cfg.batch_size, self.cfg.t_max, None)?;
        b.truncate(self.cfg.eval_batches);
        Ok(b)
    }

    pub fn lineage_map(models: &[LoadedModel]) -> HashMap<String, String> {
        models.iter().map(|m| (m.id.clone(), m.lineage())).collect()
    }

    pub fn evaluate(&self, models: &[LoadedModel], batches: &[Batch]) -> Result<(Vec<MatrixEntry>, f64)> {
        let named: Vec<(&str, &ModelParams)> = models.iter().map(|m| (m.id.as_str(), m.params())).collect();
        let rows = pair_matrix(&named, batches, &self.vocab)?;
        write_matrix_csv(&self.dir.matrix_csv(), &rows)?;
        let adv = binding_advantage(&rows, &Self::lineage_map(models))?;
        let hashes: HashMap<&str, String> = models
            .iter()
            .map(|m| Ok((m.id.as_str(), m.config_hash()?)))
            .collect::<Result<_>>()?;
        let entries = rows
            .into_iter()
            .map(|row| MatrixEntry {
                encoder_config_hash: hashes[row.encoder.as_str()].clone(),
                decoder_config_hash: hashes[row.decoder.as_str()].clone(),
                row,
            })
            .collect();
        Ok((entries, adv))
    }

    pub fn diagnose(&self, models: &[LoadedModel], batches: &[Batch]) -> Result<Vec<DiagnosticsEntry>> {
        let by_id: HashMap<&str, &LoadedModel> = models.iter().map(|m| (m.id.as_str(), m)).collect();
        let probes = probe_batches(batches, &self.vocab, self.cfg.t_max)?;
        let mut captures = HashMap::new();
        for m in models {
            let parts = probes
                .iter()
                .map(|b| capture_attention(m.params(), b, AttentionSite::EncoderSelfL0))
                .collect::<Result<Vec<_>>>()?;
            captures.insert(m.id.as_str(), concat_captures(parts)?);
        }
        let mut entries = Vec::new();
        for (a, b) in DIAGNOSTIC_PAIRS {
            let (Some(ma), Some(mb)) = (by_id.get(a), by_id.get(b)) else {
                continue;
            };
            entries.push(DiagnosticsEntry {
                row: DiagnosticsRow {
                    model_a: a.to_owned(),
                    model_b: b.to_owned(),
                    weight_l2: weight_l2(ma.params(), mb.params())?,
                    kl: attn_kl(&captures[a], &captures[b])?,
                    cosine: attn_cosine(&captures[a], &captures[b])?,
                },
                a_config_hash: ma.config_hash()?,
                b_config_hash: mb.config_hash()?,
            });
        }
        let rows: Vec<DiagnosticsRow> = entries.iter().map(|e| e.row.clone()).collect();
        write_diagnostics_csv(&self.dir.diagnostics_csv(), &rows)?;
        self.export_attention(models, &probes[0])?;
        Ok(entries)
    }

    /// Attention grids on the probe string for plotting.
    fn export_attention(&self, models: &[LoadedModel], probe: &Batch) -> Result<()> {
        let dir = self.dir.attention_dir();
        fs::create_dir_all(&dir)?;
        for m in models {
            for site in [AttentionSite::EncoderSelfL0, AttentionSite::DecoderSelfFinalStep] {
                let c = capture_attention(m.params(), probe, site)?;
                write_attention_csv(&dir.join(format!("{}_{}.csv", m.id, site.as_str())), &c)?;
            }
        }
        if let Some(enc) = models.first() {
            for dec in models {
                let c = capture_attention_pair(enc.params(), dec.params(), probe, AttentionSite::DecoderCross)?;
                write_attention_csv(&dir.join(format!("{}_to_{}_decoder_cross.csv", enc.id, dec.id)), &c)?;
            }
        }
        Ok(())
    }

    /// Fits an adapter from `source`'s memory space to `target`'s on the
    /// first `adapter_pairs` training sequences and decodes the evaluation
    /// batches with `target`'s decoder.
    pub fn adapter_attack(
        &self,
        source: &LoadedModel,
        target: &LoadedModel,
        train_corpus: &[String],
        batches: &[Batch],
    ) -> Result<AdapterReport> {
        let n = self.cfg.adapter_pairs.min(train_corpus.len());
        let fit_set = &train_corpus[..n];
        let eval_set: HashSet<Vec<u32>> = batches
            .iter()
            .flat_map(|b| (0..b.len()).map(move |i| b.sequence(i).to_vec()))
            .collect();
        let fit_batches = make_batches(fit_set, &self.vocab, self.cfg.batch_size, self.cfg.t_max, None)?;
        let disjoint = fit_batches
            .iter()
            .all(|b| (0..b.len()).all(|i| !eval_set.contains(b.sequence(i))));
        if !disjoint {
            return Err(Error::Contract("adapter training sequences overlap the evaluation batches".into()));
        }
        let (mut src, mut tgt) = (Vec::new(), Vec::new());
        for b in &fit_batches {
            src.extend(encode(source.params(), b, None)?);
            tgt.extend(encode(target.params(), b, None)?);
        }
        let train_rows = src.iter().map(|m| m.src_pad_mask.iter().filter(|p| !**p).count()).sum();
        let mut adapter = fit_linear_adapter(&src, &tgt, self.cfg.adapter_lambda)?;
        adapter.source = source.id.clone();
        adapter.target = target.id.clone();
        let metrics = adapter_cross_decode(
            (source.id.as_str(), source.params()),
            &adapter,
            (target.id.as_str(), target.params()),
            batches,
            &self.vocab,
        )?;
        Ok(AdapterReport {
            source: source.id.clone(),
            target: target.id.clone(),
            lambda: adapter.lambda,
            n_train_pairs: adapter.n_train_pairs,
            train_rows,
            train_eval_disjoint: disjoint,
            metrics,
            encoder_config_hash: source.config_hash()?,
            decoder_config_hash: target.config_hash()?,
        })
    }

    pub fn identity_adapter_row(&self, model: &LoadedModel, batches: &[Batch]) -> Result<MetricsRow> {
        let name = model.id.as_str();
        adapter_cross_decode(
            (name, model.params()),
            &Adapter::identity(model.params().config().d_model),
            (name, model.params()),
            batches,
            &self.vocab,
        )
    }

    pub fn noise_sweep(&self, model: &LoadedModel, batches: &[Batch], sigmas: &[f64]) -> Result<Vec<SweepPoint>> {
        sigmas
            .iter()
            .map(|&sigma| {
                let p = Perturbation::Gaussian {
                    sigma,
                    seed: self.cfg.noise_seed,
                };
                Ok(SweepPoint {
                    perturbation: p,
                    metrics: perturbed_self_decode((model.id.as_str(), model.params()), p, batches, &self.vocab)?,
                })
            })
            .collect()
    }

    pub fn threatlab(
        &self,
        models: &[LoadedModel],
        pairs: &[(String, String)],
        train_corpus: &[String],
        batches: &[Batch],
        self_rows: &HashMap<String, MetricsRow>,
    ) -> Result<ThreatSection> {
        let find = |id: &str| {
            models
                .iter()
                .find(|m| m.id == id)
                .ok_or_else(|| Error::Contract(format!("unknown model {id}")))
        };
        let adapters = pairs
            .iter()
            .map(|(a, b)| self.adapter_attack(find(a)?, find(b)?, train_corpus, batches))
            .collect::<Result<Vec<_>>>()?;
        let first = models.first().ok_or_else(|| Error::Contract("no models loaded".into()))?;
        let identity_self = self.identity_adapter_row(first, batches)?;
        let identity_matches_self = self_rows.get(&first.id).is_some_and(|r| *r == identity_self);
        let quantization = quantization_sweep((first.id.as_str(), first.params()), &self.cfg.quant_bits, batches, &self.vocab)?;
        let noise = self.noise_sweep(first, batches, &self.cfg.noise_sigmas)?;
        Ok(ThreatSection {
            adapters,
            identity_self,
            identity_matches_self,
            quantization_model: first.id.clone(),
            quantization_non_increasing: is_non_increasing_in_bits(&quantization),
            quantization,
            noise,
        })
    }

    pub fn model_entries(&self, models: &[LoadedModel]) -> Result<Vec<ModelEntry>> {
        models
            .iter()
            .map(|m| {
                Ok(ModelEntry {
                    id: m.id.clone(),
                    seed: m.ckpt.meta.seed,
                    lineage: m.lineage(),
                    config_hash: m.config_hash()?,
                    checkpoint_sha256: m.file_sha256.clone(),
                    num_parameters: m.params().num_parameters(),
                    epoch_losses: m.ckpt.meta.epoch_losses.clone(),
                })
            })
            .collect()
    }

    pub fn run_id(&self) -> Result<String> {
        let h = sha256_hex(self.cfg.to_toml_string()?.as_bytes());
        Ok(h[..16].to_owned())
    }

    /// Evaluation stages over the checkpoints already in the run directory.
    pub fn report(&self, adapter_pairs: &[(String, String)]) -> Result<RunReport> {
        let (train_corpus, test) = stage("data", self.data())?;
        let models = stage("load", self.load_models(&MODEL_IDS))?;
        let batches = stage("eval", self.eval_batches(&test))?;
        let (matrix, adv) = stage("eval", self.evaluate(&models, &batches))?;
        let diagnostics = if self.cfg.run_diagnostics {
            Some(stage("diagnostics", self.diagnose(&models, &batches))?)
        } else {
            None
        };
        let threatlab = if self.cfg.run_threatlab {
            let self_rows: HashMap<String, MetricsRow> = matrix
                .iter()
                .filter(|e| e.row.encoder == e.row.decoder)
                .map(|e| (e.row.encoder.clone(), e.row.clone()))
                .collect();
            Some(stage(
                "threatlab",
                self.threatlab(&models, adapter_pairs, &train_corpus, &batches, &self_rows),
            )?)
        } else {
            None
        };
        let report = RunReport {
            run_id: self.run_id()?,
            version: creator_stamp(),
            device_label: self.device_label.clone(),
            config: self.cfg.clone(),
            models: self.model_entries(&models)?,
            matrix,
            binding_advantage: adv,
            diagnostics,
            threatlab,
        };
        stage("report", report.write(&self.dir.report()))?;
        Ok(report)
    }

    /// Data, the five models, then every evaluation stage.
    pub fn run_all(&self) -> Result<RunReport> {
        fs::create_dir_all(self.dir.root())?;
        let (train_corpus, _) = stage("data", self.generate_data())?;
        for id in ["M1", "M2", "M3"] {
            let seed = self.seed_of(id).expect("known id");
            stage(&format!("train {id}"), self.train_model(id, seed, &train_corpus))?;
        }
        stage("clone", self.clone_model("M1", "M1_CLONE"))?;
        stage("same-seed retrain", self.train_model("M1_SAMESEED", self.cfg.seed_m1, &train_corpus))?;
        self.report(&default_adapter_pairs())
    }
}

pub fn default_adapter_pairs() -> Vec<(String, String)> {
    vec![("M1".into(), "M2".into())]
}
