//! `moble`: generate data, train, clone, evaluate and probe models.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moble::eval::MetricsRow;
use moble::registry::{default_adapter_pairs, Experiment, ExperimentConfig, MODEL_IDS};
use moble::threat::{is_non_increasing_in_bits, perturbed_self_decode, quantization_sweep, Perturbation};
use moble::{Error, Result};

#[derive(Parser)]
#[command(name = "moble", version, about = "Decoder binding experiments on transformer autoencoders")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat TOML experiment config; missing keys take the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding corpora, checkpoints and reports.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Free-form label recorded in the report.
    #[arg(long, global = true)]
    device_label: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and test corpora.
    GenData,
    /// Train one model from a seed.
    Train {
        #[arg(long)]
        seed: u64,
        /// Checkpoint name; defaults to M1/M2/M3 when the seed matches the config.
        #[arg(long)]
        name: Option<String>,
    },
    /// Copy a checkpoint byte for byte.
    Clone {
        #[arg(long, default_value = "M1")]
        from: String,
        #[arg(long, default_value = "M1_CLONE")]
        to: String,
    },
    /// Decode every ordered encoder→decoder pair.
    EvalMatrix,
    /// Weight distance and attention divergence between models.
    Diagnose,
    /// Fit linear adapters between memory spaces and decode through them.
    Attack {
        /// Source and target model, e.g. `M1,M2`; repeatable.
        #[arg(long = "pairs", value_parser = parse_pair)]
        pairs: Vec<(String, String)>,
        #[arg(long)]
        adapter_pairs: Option<usize>,
    },
    /// Self-decode with quantised or noisy memories.
    Perturb {
        #[arg(long, default_value = "M1")]
        model: String,
        #[arg(long, value_delimiter = ',')]
        bits: Vec<u32>,
        #[arg(long, value_delimiter = ',')]
        sigma: Vec<f64>,
    },
    /// Run every evaluation stage on existing checkpoints and write report.json.
    Report {
        #[arg(long = "pairs", value_parser = parse_pair)]
        pairs: Vec<(String, String)>,
        #[arg(long)]
        adapter_pairs: Option<usize>,
    },
    /// Data, five models, evaluation, diagnostics, adversary probes, report.
    RunAll {
        /// Reuse matching checkpoints already in the run directory.
        #[arg(long)]
        resume: bool,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once(',') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.trim().to_owned(), b.trim().to_owned())),
        _ => Err(format!("expected `encoder,decoder`, got {s:?}")),
    }
}

fn print_rows(rows: &[MetricsRow]) {
    println!("{:<12} {:<12} {:>8} {:>8} {:>8} {:>5}", "encoder", "decoder", "exact%", "token%", "levsim%", "n");
    for r in rows {
        println!(
            "{:<12} {:<12} {:>8.2} {:>8.2} {:>8.2} {:>5}",
            r.encoder, r.decoder, r.exact_pct, r.token_pct, r.levsim_pct, r.n_samples
        );
    }
}

fn experiment(common: &Common) -> Result<Experiment> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut exp = Experiment::new(cfg, common.out.clone())?;
    exp.device_label = common.device_label.clone();
    Ok(exp)
}

fn run(cli: Cli) -> Result<()> {
    let mut exp = experiment(&cli.common)?;
    match cli.command {
        Command::GenData => {
            let (train, test) = exp.generate_data()?;
            println!("wrote {} train and {} test sequences under {}", train.len(), test.len(), exp.dir.root().display());
        }
        Command::Train { seed, name } => {
            let id = name.unwrap_or_else(|| match seed {
                s if s == exp.cfg.seed_m1 => "M1".into(),
                s if s == exp.cfg.seed_m2 => "M2".into(),
                s if s == exp.cfg.seed_m3 => "M3".into(),
                s => format!("seed{s}"),
            });
            let (train, _) = exp.data()?;
            let ckpt = exp.train_model(&id, seed, &train)?;
            println!("{id}: epoch losses {:?}", ckpt.meta.epoch_losses);
            println!("saved {}", exp.dir.model(&id).display());
        }
        Command::Clone { from, to } => {
            exp.clone_model(&from, &to)?;
            println!("copied {} to {}", exp.dir.model(&from).display(), exp.dir.model(&to).display());
        }
        Command::EvalMatrix => {
            let (_, test) = exp.data()?;
            let models = exp.load_models(&present(&exp))?;
            let (entries, adv) = exp.evaluate(&models, &exp.eval_batches(&test)?)?;
            print_rows(&entries.into_iter().map(|e| e.row).collect::<Vec<_>>());
            println!("binding advantage: {adv:.2} points");
        }
        Command::Diagnose => {
            let (_, test) = exp.data()?;
            let models = exp.load_models(&present(&exp))?;
            let entries = exp.diagnose(&models, &exp.eval_batches(&test)?)?;
            println!("{:<12} {:<12} {:>12} {:>10} {:>10}", "model_a", "model_b", "weight_l2", "kl", "cosine");
            for e in entries {
                let r = e.row;
                println!("{:<12} {:<12} {:>12.4} {:>10.6} {:>10.6}", r.model_a, r.model_b, r.weight_l2, r.kl, r.cosine);
            }
        }
        Command::Attack { pairs, adapter_pairs } => {
            if let Some(n) = adapter_pairs {
                exp.cfg.adapter_pairs = n;
            }
            let pairs = if pairs.is_empty() { default_adapter_pairs() } else { pairs };
            let (train, test) = exp.data()?;
            let batches = exp.eval_batches(&test)?;
            let mut ids: Vec<&str> = pairs.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]).collect();
            ids.dedup();
            let models = exp.load_models(&ids)?;
            let find = |id: &str| models.iter().find(|m| m.id == id).expect("loaded");
            for (a, b) in &pairs {
                let r = exp.adapter_attack(find(a), find(b), &train, &batches)?;
                println!(
                    "adapter {a}→{b}: λ={} trained on {} sequences ({} rows)",
                    r.lambda, r.n_train_pairs, r.train_rows
                );
                print_rows(&[r.metrics]);
            }
        }
        Command::Perturb { model, bits, sigma } => {
            let (_, test) = exp.data()?;
            let batches = exp.eval_batches(&test)?;
            let m = exp.load_model(&model)?;
            let named = (m.id.as_str(), m.params());
            if bits.is_empty() && sigma.is_empty() {
                return Err(Error::Config("give --bits and/or --sigma".into()));
            }
            if !bits.is_empty() {
                let sweep = quantization_sweep(named, &bits, &batches, &exp.vocab)?;
                for p in &sweep {
                    if let Perturbation::Quantize { bits } = p.perturbation {
                        print!("bits {bits:>2}: ");
                    }
                    print_rows(std::slice::from_ref(&p.metrics));
                }
                println!("non-increasing as bits drop: {}", is_non_increasing_in_bits(&sweep));
            }
            for s in sigma {
                let p = Perturbation::Gaussian { sigma: s, seed: exp.cfg.noise_seed };
                println!("sigma {s}:");
                print_rows(&[perturbed_self_decode(named, p, &batches, &exp.vocab)?]);
            }
        }
        Command::Report { pairs, adapter_pairs } => {
            if let Some(n) = adapter_pairs {
                exp.cfg.adapter_pairs = n;
            }
            let pairs = if pairs.is_empty() { default_adapter_pairs() } else { pairs };
            let report = exp.report(&pairs)?;
            print_rows(&report.matrix.iter().map(|e| e.row.clone()).collect::<Vec<_>>());
            println!("binding advantage: {:.2} points", report.binding_advantage);
            println!("wrote {}", exp.dir.report().display());
        }
        Command::RunAll { resume } => {
            exp.resume = resume;
            let report = exp.run_all()?;
            for m in &report.models {
                println!("{}: epoch losses {:?}", m.id, m.epoch_losses);
            }
            print_rows(&report.matrix.iter().map(|e| e.row.clone()).collect::<Vec<_>>());
            println!("binding advantage: {:.2} points", report.binding_advantage);
            println!("wrote {}", exp.dir.report().display());
        }
    }
    Ok(())
}

/// Standard model ids whose checkpoints exist in the run directory.
fn present(exp: &Experiment) -> Vec<&'static str> {
    MODEL_IDS.into_iter().filter(|id| exp.dir.model(id).exists()).collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
