use moble::data::{Batch, TokenId, Vocabulary, BOS, EOS};
use moble::diag::{cosine, kl_rows, smooth_row};
use moble::eval::{metric_levsim, metric_token_acc, token_accuracy};
use moble::model::{decoder_forward, encode, init_model, ModelConfig};
use moble::tensor::ops::softmax_row_masked;
use moble::tensor::Tensor;
use moble::train::{clip_global_norm, global_norm, GradMap};
use proptest::prelude::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        dropout: 0.0,
        t_max: 16,
        ..ModelConfig::default()
    }
}

fn payload_string(max: usize) -> impl Strategy<Value = String> {
    let chars: Vec<char> = Vocabulary::new().payload_chars().collect();
    prop::collection::vec(prop::sample::select(chars), 0..max).prop_map(|v| v.into_iter().collect())
}

fn payload_ids(lo: usize, hi: usize) -> impl Strategy<Value = Vec<TokenId>> {
    prop::collection::vec(3u32..86, lo..hi)
}

/// Textbook O(nm) edit distance over chars.
fn levenshtein_dp(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i; b.len() + 1];
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(-30f32..30.0, 1..40), mask_bits in any::<u64>()) {
        let mut r = row.clone();
        let masked = |j: usize| j > 0 && (mask_bits >> (j % 64)) & 1 == 1;
        prop_assert!(softmax_row_masked(&mut r, masked));
        let s: f32 = r.iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-5);
        for (j, p) in r.iter().enumerate() {
            prop_assert!(*p >= 0.0);
            if masked(j) {
                prop_assert_eq!(*p, 0.0);
            }
        }
    }

    #[test]
    fn tokenize_roundtrips(s in payload_string(40)) {
        let v = Vocabulary::new();
        let ids = v.tokenize(&s, 50).unwrap();
        prop_assert_eq!(ids[0], BOS);
        prop_assert_eq!(*ids.last().unwrap(), EOS);
        prop_assert_eq!(ids.len(), s.chars().count() + 2);
        prop_assert_eq!(v.detokenize(&ids), s);
    }

    #[test]
    fn levsim_matches_dp_and_is_symmetric(a in payload_string(20), b in payload_string(20)) {
        let d = levenshtein_dp(&a, &b) as f64;
        let m = a.chars().count().max(b.chars().count()).max(1) as f64;
        prop_assert!((metric_levsim(&a, &b) - 100.0 * (1.0 - d / m)).abs() <= 1e-9);
        prop_assert_eq!(metric_levsim(&a, &b), metric_levsim(&b, &a));
        prop_assert!((0.0..=100.0).contains(&metric_levsim(&a, &b)));
    }

    #[test]
    fn corrupting_one_token_drops_accuracy_by_one_position(
        body in payload_ids(1, 30),
        at in any::<prop::sample::Index>(),
    ) {
        let mut r = vec![BOS];
        r.extend(&body);
        r.push(EOS);
        let mut h = r.clone();
        let i = 1 + at.index(body.len());
        h[i] = if h[i] == 3 { 4 } else { 3 };
        let full = metric_token_acc(&[&r], &[&r]).unwrap();
        let hit = metric_token_acc(&[&h], &[&r]).unwrap();
        prop_assert!((full - 100.0).abs() <= 1e-9);
        prop_assert!((full - hit - 100.0 / body.len() as f64).abs() <= 1e-9);
        prop_assert!((token_accuracy(&h, &r) - token_accuracy(&r, &h)).abs() <= 1e-12);
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_equal_rows(
        p in prop::collection::vec(0f32..1.0, 2..12),
        q in prop::collection::vec(0f32..1.0, 2..12),
    ) {
        let n = p.len().min(q.len());
        let norm = |r: &[f32]| {
            let s: f32 = r.iter().sum::<f32>() + 1e-6;
            r.iter().map(|x| x / s).collect::<Vec<f32>>()
        };
        let (p, q) = (norm(&p[..n]), norm(&q[..n]));
        let (sp, sq) = (smooth_row(&p), smooth_row(&q));
        prop_assert!(kl_rows(&sp, &sq) >= -1e-12);
        prop_assert!(kl_rows(&sp, &sp).abs() <= 1e-12);
        prop_assert!((cosine(&p, &p) - 1.0).abs() <= 1e-9 || p.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn clipping_bounds_the_norm_and_keeps_direction(
        vals in prop::collection::vec(-10f32..10.0, 1..50),
        max in 0.01f32..5.0,
    ) {
        let mut g = GradMap::new();
        g.insert("w".into(), Tensor::new(vec![vals.len()], vals.clone()).unwrap());
        let before = global_norm(&g);
        let reported = clip_global_norm(&mut g, max).unwrap();
        prop_assert!((reported - before).abs() <= 1e-9 * before.max(1.0));
        let after = global_norm(&g);
        prop_assert!(after <= f64::from(max) * (1.0 + 1e-5) || after <= before * (1.0 + 1e-6));
        if before > 0.0 {
            prop_assert!(after <= before * (1.0 + 1e-6));
            let c = cosine(&vals, g["w"].data());
            prop_assert!(c > 1.0 - 1e-5, "cosine {c}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn future_tokens_never_change_earlier_logits(
        a in payload_ids(4, 10),
        tail in payload_ids(1, 4),
        cut in 1usize..4,
    ) {
        let model = init_model(&tiny(), 21).unwrap();
        let mut src = vec![BOS];
        src.extend(&a);
        src.push(EOS);
        let mem = encode(&model, &Batch::from_sequences(&[src.clone()]), None).unwrap();
        let keep = cut.min(src.len() - 1);
        let mut other = src[..keep].to_vec();
        other.extend(&tail);
        let la = decoder_forward(&model, &Batch::from_sequences(&[src]), &mem, None).unwrap();
        let lb = decoder_forward(&model, &Batch::from_sequences(&[other]), &mem, None).unwrap();
        let v = model.config().vocab_size;
        prop_assert_eq!(&la[0].data()[..keep * v], &lb[0].data()[..keep * v]);
    }

    #[test]
    fn padding_carries_no_attention_mass(body in payload_ids(3, 10), extra in 1usize..5) {
        let model = init_model(&tiny(), 8).unwrap();
        let mut s = vec![BOS];
        s.extend(&body);
        s.push(EOS);
        let short = Batch::from_sequences(&[s.clone(), vec![BOS, 5, EOS]]);
        let wide = short.with_extra_padding(extra);
        let caps = moble::diag::capture_attention(&model, &wide, moble::diag::AttentionSite::EncoderSelfL0).unwrap();
        let base = moble::diag::capture_attention(&model, &short, moble::diag::AttentionSite::EncoderSelfL0).unwrap();
        for (m, b) in caps.maps.iter().zip(&base.maps) {
            prop_assert_eq!(m.shape(), b.shape());
            // Cropped rows still sum to one, so nothing leaked onto padding.
            for r in 0..m.rows() {
                prop_assert!((m.row(r).iter().sum::<f32>() - 1.0).abs() <= 1e-5);
            }
            for (x, y) in m.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }
    }
}
