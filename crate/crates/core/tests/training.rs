use moble::data::{generate_corpus, Batch, CorpusSpec, Vocabulary};
use moble::model::{init_model, ModelConfig};
use moble::train::{teacher_forced_loss, train, train_step, OptimizerState, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        d_ff: 64,
        dropout: 0.0,
        t_max: 24,
        ..ModelConfig::default()
    }
}

#[test]
fn a_single_sequence_is_memorised() {
    let vocab = Vocabulary::new();
    let batch = Batch::from_strings(&["keep it secret".into()], &vocab, 24).unwrap();
    let mut model = init_model(&small(), 1).unwrap();
    let cfg = TrainConfig { lr: 3e-3, ..TrainConfig::default() };
    let mut state = OptimizerState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let first = train_step(&mut model, &batch, &mut state, &cfg, &mut rng).unwrap();
    for _ in 1..200 {
        train_step(&mut model, &batch, &mut state, &cfg, &mut rng).unwrap();
    }
    let last = teacher_forced_loss(&model, &batch, None).unwrap().value();
    assert!(first > 3.5);
    assert!(last < 0.01, "loss after 200 steps: {last}");
}

#[test]
fn extra_pad_columns_change_neither_loss_nor_gradients() {
    let vocab = Vocabulary::new();
    let batch = Batch::from_strings(&["abc".into(), "a longer one".into()], &vocab, 24).unwrap();
    let wide = batch.with_extra_padding(5);
    let model = init_model(&small(), 2).unwrap();
    let a = teacher_forced_loss(&model, &batch, None).unwrap();
    let b = teacher_forced_loss(&model, &wide, None).unwrap();
    assert_eq!(a.value(), b.value());
    assert_eq!(a.targets, b.targets);
    for ((n, ga), (_, gb)) in a.gradients().unwrap().iter().zip(b.gradients().unwrap().iter()) {
        assert_eq!(ga, gb, "{n}");
    }
}

#[test]
fn training_is_deterministic_and_trends_down() {
    let vocab = Vocabulary::new();
    let corpus = generate_corpus(4, CorpusSpec { n: 96, len_lo: 4, len_hi: 12 }, &vocab).unwrap();
    let cfg = TrainConfig {
        lr: 2e-3,
        batch_size: 16,
        epochs: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let model_cfg = ModelConfig { dropout: 0.1, ..small() };
    let run = || {
        let mut m = init_model(&model_cfg, 9).unwrap();
        let t = train(&mut m, &corpus, &cfg, &vocab).unwrap();
        (m, t)
    };
    let (m1, t1) = run();
    let (m2, t2) = run();
    assert_eq!(t1, t2);
    assert_eq!(m1, m2);
    assert_eq!(t1.epoch_losses.len(), 4);
    assert_eq!(t1.steps, 4 * 6);
    for w in t1.epoch_losses.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "{:?}", t1.epoch_losses);
    }
    let mut other = init_model(&model_cfg, 9).unwrap();
    train(&mut other, &corpus, &TrainConfig { seed: 10, ..cfg }, &vocab).unwrap();
    assert_ne!(other, m1);
}
