use moble::data::{Batch, TokenId, Vocabulary, BOS, EOS, PAD};
use moble::model::{decoder_forward, encode, init_model, IncrementalDecoder, ModelConfig, ModelParams};
use moble::tensor::{finite_diff_check, sample_coords, Tensor, TensorError};
use moble::train::teacher_forced_loss;
use moble::Error;

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        dropout: 0.0,
        t_max: 12,
        ..ModelConfig::default()
    }
}

fn seqs() -> Vec<Vec<TokenId>> {
    vec![
        vec![BOS, 5, 9, 33, 12, EOS],
        vec![BOS, 70, 4, EOS],
        vec![BOS, 8, 8, 8, 40, 51, 17, EOS],
    ]
}

fn loss_and_grad(model: &ModelParams, batch: &Batch) -> Result<(f32, Tensor), TensorError> {
    let rec = teacher_forced_loss(model, batch, None).map_err(|e| TensorError::Contract(e.to_string()))?;
    let grads = rec.gradients().map_err(|e| TensorError::Contract(e.to_string()))?;
    let flat: Vec<f32> = grads.values().flat_map(|t| t.data().iter().copied()).collect();
    let n = flat.len();
    Ok((rec.value(), Tensor::new(vec![n], flat)?))
}

#[test]
fn gradients_match_finite_differences() {
    let model = init_model(&tiny(), 3).unwrap();
    let batch = Batch::from_sequences(&seqs());
    let flat = model.flatten();
    let coords = sample_coords(flat.numel(), 64, 11);
    let report = finite_diff_check(
        |p| loss_and_grad(&model.with_flat(p).unwrap(), &batch),
        &flat,
        1e-2,
        &coords,
    )
    .unwrap();
    assert!(report.checked >= 20);
    assert!(report.max_rel_error <= 3e-3, "{report:?}");
}

/// Stricter than the scaled check above: every tensor, relative to the
/// gradient's own magnitude wherever it is not tiny.
#[test]
fn every_parameter_tensor_has_a_correct_gradient() {
    let model = init_model(&tiny(), 5).unwrap();
    let batch = Batch::from_sequences(&seqs());
    let rec = teacher_forced_loss(&model, &batch, None).unwrap();
    let grads = rec.gradients().unwrap();
    let loss = |m: &ModelParams| f64::from(teacher_forced_loss(m, &batch, None).unwrap().value());
    for (name, g) in &grads {
        let c = (0..g.numel())
            .max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs()))
            .unwrap();
        let ga = f64::from(g.data()[c]);
        if ga.abs() < 1e-3 {
            continue;
        }
        let h = 1e-2f32;
        let mut up = model.clone();
        up.get_mut(name).unwrap().data_mut()[c] += h;
        let mut down = model.clone();
        down.get_mut(name).unwrap().data_mut()[c] -= h;
        let fd = (loss(&up) - loss(&down)) / (2.0 * f64::from(h));
        let rel = (ga - fd).abs() / ga.abs();
        assert!(rel < 2e-2, "{name}[{c}]: analytic {ga} numeric {fd}");
    }
}

#[test]
fn decoder_is_causal_bit_exact() {
    let model = init_model(&tiny(), 1).unwrap();
    let src = Batch::from_sequences(&seqs()[..1]);
    let mem = encode(&model, &src, None).unwrap();
    let a: Vec<TokenId> = vec![BOS, 5, 9, 33, 12];
    let mut b = a.clone();
    b[4] = 77;
    b[3] = 60;
    let la = decoder_forward(&model, &Batch::from_sequences(&[a]), &mem, None).unwrap();
    let lb = decoder_forward(&model, &Batch::from_sequences(&[b]), &mem, None).unwrap();
    let v = model.config().vocab_size;
    // Positions 0..3 only see tokens that agree.
    assert_eq!(la[0].data()[..3 * v], lb[0].data()[..3 * v]);
    assert_ne!(la[0].data()[3 * v..4 * v], lb[0].data()[3 * v..4 * v]);
}

#[test]
fn padding_does_not_change_memories_or_logits() {
    let model = init_model(&tiny(), 2).unwrap();
    let batch = Batch::from_sequences(&seqs());
    let wide = batch.with_extra_padding(3);
    let m1 = encode(&model, &batch, None).unwrap();
    let m2 = encode(&model, &wide, None).unwrap();
    for (i, (a, b)) in m1.iter().zip(&m2).enumerate() {
        assert_eq!(b.len(), a.len() + 3);
        let n = batch.lengths[i] * model.config().d_model;
        for (x, y) in a.values.data()[..n].iter().zip(&b.values.data()[..n]) {
            assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
        }
    }
    let l1 = decoder_forward(&model, &batch, &m1, None).unwrap();
    let l2 = decoder_forward(&model, &wide, &m2, None).unwrap();
    for (a, b) in l1.iter().zip(&l2) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-5);
        }
    }
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let model = init_model(&tiny(), 4).unwrap();
    let batch = Batch::from_sequences(&seqs());
    let mems = encode(&model, &batch, None).unwrap();
    let full = decoder_forward(&model, &batch, &mems, None).unwrap();
    let v = model.config().vocab_size;
    let mut dec = IncrementalDecoder::new(&model, &mems).unwrap();
    let active: Vec<usize> = (0..batch.len()).collect();
    for t in 0..batch.seq_len() {
        let toks: Vec<TokenId> = active.iter().map(|&i| batch.row(i)[t]).collect();
        let step = dec.step(&active, &toks).unwrap();
        for (k, &i) in active.iter().enumerate() {
            if t >= batch.lengths[i] {
                continue;
            }
            let want = &full[i].data()[t * v..(t + 1) * v];
            let got = &step.data()[k * v..(k + 1) * v];
            for (x, y) in want.iter().zip(got) {
                assert!((x - y).abs() <= 1e-4, "seq {i} pos {t}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn cross_model_memories_decode_and_mismatches_fail() {
    let a = init_model(&tiny(), 1).unwrap();
    let b = init_model(&tiny(), 2).unwrap();
    let batch = Batch::from_sequences(&seqs());
    let mems = encode(&a, &batch, None).unwrap();
    let logits = decoder_forward(&b, &batch, &mems, None).unwrap();
    assert_eq!(logits.len(), 3);
    assert!(logits.iter().all(Tensor::is_finite));

    let wide = init_model(&ModelConfig { d_model: 16, ..tiny() }, 1).unwrap();
    assert!(matches!(decoder_forward(&wide, &batch, &mems, None), Err(Error::Tensor(_))));

    let long = Batch::from_sequences(&[vec![BOS; 20]]);
    assert!(matches!(encode(&a, &long, None), Err(Error::Length { .. })));
}

#[test]
fn encode_is_deterministic() {
    let model = init_model(&tiny(), 9).unwrap();
    let batch = Batch::from_strings(&["secure msg".into()], &Vocabulary::new(), 12).unwrap();
    let x = encode(&model, &batch, None).unwrap();
    let y = encode(&model, &batch, None).unwrap();
    assert_eq!(x[0], y[0]);
    assert_eq!(batch.row(0).last(), Some(&EOS));
    assert!(!batch.row(0).contains(&PAD));
}

#[test]
fn packed_heads_match_a_per_head_loop() {
    use moble::tensor::{AttentionLayout, Graph, Segment};
    use rand::{Rng, SeedableRng};
    let (t, d, h) = (5usize, 8usize, 2usize);
    let dk = d / h;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut rand_t = |r: usize, c: usize| {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
    };
    let (q, k, v, wo) = (rand_t(t, d), rand_t(t, d), rand_t(t, d), rand_t(d, d));

    let mut g = Graph::new();
    let (qv, kv, vv, wv) = (
        g.constant(q.clone()).unwrap(),
        g.constant(k.clone()).unwrap(),
        g.constant(v.clone()).unwrap(),
        g.constant(wo.clone()).unwrap(),
    );
    let layout = AttentionLayout {
        n_heads: h,
        causal: false,
        segments: vec![Segment { q_start: 0, q_len: t, k_start: 0, k_len: t }],
        key_pad: None,
    };
    let a = g.attention(qv, kv, vv, layout).unwrap();
    let z = g.matmul(a, wv).unwrap();
    let got = g.value(z).clone();

    let mut concat = vec![0.0f64; t * d];
    for head in 0..h {
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| {
                    (0..dk)
                        .map(|c| f64::from(q.get(&[i, head * dk + c])) * f64::from(k.get(&[j, head * dk + c])))
                        .sum::<f64>()
                        / (dk as f64).sqrt()
                })
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let sum: f64 = e.iter().sum();
            for c in 0..dk {
                concat[i * d + head * dk + c] =
                    (0..t).map(|j| e[j] / sum * f64::from(v.get(&[j, head * dk + c]))).sum();
            }
        }
    }
    for i in 0..t {
        for c in 0..d {
            let want: f64 = (0..d).map(|r| concat[i * d + r] * f64::from(wo.get(&[r, c]))).sum();
            assert!((f64::from(got.get(&[i, c])) - want).abs() <= 1e-5);
        }
    }
}
