use odeformer_core::blocks::{BlockVariant, OdeGranularity};
use odeformer_core::model::{
    decode_step, encode_states, greedy_decode, init_params, lm_forward, lm_logits, perplexity, seq2seq_logits,
    ModelConfig, Pass, SeqBatch, TokenBatch,
};
use odeformer_core::tensor::{ParamStore, Tensor};
use odeformer_core::Error;

fn zero_where(store: &mut ParamStore<f64>, pred: impl Fn(&str) -> bool) {
    for (name, t) in store.iter_mut() {
        if pred(name) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn is_output_projection(name: &str) -> bool {
    [".wo", ".bo", ".w2", ".b2"].iter().any(|s| name.ends_with(s))
}

fn source() -> TokenBatch {
    TokenBatch::from_rows(&[vec![3, 4, 5, 6], vec![7, 8, 9]], Some(0)).unwrap()
}

fn seq_batch() -> SeqBatch {
    let target = TokenBatch::from_rows(&[vec![1, 3, 4, 5, 6, 2], vec![1, 7, 8, 9, 2]], Some(0)).unwrap();
    SeqBatch::new(source(), target).unwrap()
}

fn small(variant: BlockVariant) -> ModelConfig {
    ModelConfig::encoder_decoder(12, 8, 2, 1).with_variant(variant)
}

/// Reference layer norm with unit gain and zero bias.
fn layer_norm(row: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    row.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
}

fn embedded(cfg: &ModelConfig, store: &ParamStore<f64>, table: &str, tokens: &TokenBatch) -> Vec<Vec<f64>> {
    let d = cfg.d_model;
    let e = store.get(table).unwrap().data();
    let mut rows = Vec::new();
    for r in 0..tokens.rows() {
        for (pos, &tok) in tokens.row(r).iter().enumerate() {
            let row: Vec<f64> = (0..d)
                .map(|j| {
                    let i = j - j % 2;
                    let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
                    let p = if j % 2 == 0 { angle.sin() } else { angle.cos() };
                    e[tok * d + j] * (d as f64).sqrt() + p
                })
                .collect();
            rows.push(row);
        }
    }
    rows
}

#[test]
fn zero_increments_leave_normalized_embeddings() {
    for v in BlockVariant::ALL {
        let cfg = small(v);
        let mut store = init_params::<f64>(&cfg, 3).unwrap();
        zero_where(&mut store, is_output_projection);
        let src = source();
        let states = encode_states(&cfg, &store, &src).unwrap();
        let want: Vec<f64> =
            embedded(&cfg, &store, "enc.embed", &src).iter().flat_map(|r| layer_norm(r, cfg.ln_eps)).collect();
        for (a, b) in states.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{v}: {a} vs {b}");
        }
    }
}

#[test]
fn update_rules_change_encoder_output() {
    let euler = small(BlockVariant::Euler);
    let rk2 = ModelConfig { enc_depth: 1, ..small(BlockVariant::Rk2) };
    let euler = ModelConfig { enc_depth: 1, ..euler };
    let store = init_params::<f64>(&euler, 5).unwrap();
    let a = encode_states(&euler, &store, &source()).unwrap();
    let b = encode_states(&rk2, &store, &source()).unwrap();
    assert_ne!(a.data(), b.data());
}

#[test]
fn forward_is_deterministic() {
    let cfg = small(BlockVariant::Rk4);
    let run = || {
        let store = init_params::<f64>(&cfg, 11).unwrap();
        let mut pass = Pass::eval(&store);
        let logits = seq2seq_logits(&cfg, &mut pass, &seq_batch()).unwrap();
        pass.tape.data(logits).unwrap().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn decode_step_rows_are_distributions_and_tied_scores() {
    let cfg = small(BlockVariant::Rk2);
    let mut store = init_params::<f64>(&cfg, 2).unwrap();
    let src = source();
    let memory = encode_states(&cfg, &store, &src).unwrap();
    let prefix = TokenBatch::from_rows(&[vec![1, 3], vec![1, 7]], Some(0)).unwrap();
    let logits = decode_step(&cfg, &store, &prefix, &memory, &src).unwrap();
    assert_eq!(logits.shape(), &[2, 12]);
    for row in logits.data().chunks(12) {
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let total: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let probs: f64 = row.iter().map(|z| (z - max).exp() / total).sum();
        assert!((probs - 1.0).abs() < 1e-6);
    }

    // With every decoder sublayer silenced, the logits are similarity scores
    // between the normalized last-position embedding and the tied table.
    zero_where(&mut store, |n| n.starts_with("dec.block") && is_output_projection(n));
    let logits = decode_step(&cfg, &store, &prefix, &memory, &src).unwrap();
    let rows = embedded(&cfg, &store, "dec.embed", &prefix);
    let table = store.get("dec.embed").unwrap().data();
    for r in 0..2 {
        let h = layer_norm(&rows[r * 2 + 1], cfg.ln_eps);
        for tok in 0..12 {
            let want: f64 = h.iter().zip(&table[tok * 8..tok * 8 + 8]).map(|(a, b)| a * b).sum();
            assert!((logits.data()[r * 12 + tok] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn decoder_is_causal() {
    let cfg = small(BlockVariant::Rk2GatedSigmoidPair);
    let store = init_params::<f64>(&cfg, 4).unwrap();
    let logits_for = |target: Vec<usize>| {
        let batch = SeqBatch::new(
            TokenBatch::from_rows(&[vec![3, 4, 5]], Some(0)).unwrap(),
            TokenBatch::from_rows(&[target], Some(0)).unwrap(),
        )
        .unwrap();
        let mut pass = Pass::eval(&store);
        let z = seq2seq_logits(&cfg, &mut pass, &batch).unwrap();
        pass.tape.data(z).unwrap().to_vec()
    };
    let a = logits_for(vec![1, 3, 4, 5, 2]);
    let b = logits_for(vec![1, 3, 9, 5, 2]);
    // input position 2 changed: positions 0 and 1 must not move
    assert_eq!(a[..2 * 12], b[..2 * 12]);
    assert_ne!(a[2 * 12..3 * 12], b[2 * 12..3 * 12]);
}

#[test]
fn language_model_is_causal_for_every_variant() {
    for v in BlockVariant::ALL {
        let cfg = ModelConfig::language_model(9, 8, 2).with_variant(v);
        let store = init_params::<f64>(&cfg, 6).unwrap();
        let run = |ids: Vec<usize>| {
            let mut pass = Pass::eval(&store);
            let z = lm_logits(&cfg, &mut pass, &TokenBatch::from_rows(&[ids], None).unwrap()).unwrap();
            pass.tape.data(z).unwrap().to_vec()
        };
        let a = run(vec![1, 2, 3, 4, 5]);
        let b = run(vec![1, 2, 3, 8, 5]);
        assert_eq!(a[..3 * 9], b[..3 * 9], "{v}");
        assert_ne!(a[3 * 9..], b[3 * 9..], "{v}");
    }
}

#[test]
fn ode_variant_is_confined_to_the_encoder() {
    for v in BlockVariant::ALL {
        let cfg = ModelConfig::encoder_decoder(12, 8, 3, 2).with_variant(v);
        let store = init_params::<f64>(&cfg, 1).unwrap();
        let mut pass = Pass::eval(&store);
        seq2seq_logits(&cfg, &mut pass, &seq_batch()).unwrap();
        assert_eq!(pass.trace.encoder, vec![v.stage_count(); 3], "{v}");
        assert_eq!(pass.trace.decoder, vec![1, 1], "{v}");
    }
}

#[test]
fn granularity_traces() {
    let base = ModelConfig::language_model(9, 8, 2).with_variant(BlockVariant::Rk4);
    let tokens = TokenBatch::from_rows(&[vec![1, 2, 3]], None).unwrap();
    for (g, want) in [
        (OdeGranularity::Fused, vec![4, 4]),
        (OdeGranularity::SublayerWise, vec![4, 4, 4, 4]),
        (OdeGranularity::SanOnly, vec![4, 1, 4, 1]),
        (OdeGranularity::FfnOnly, vec![1, 4, 1, 4]),
    ] {
        let cfg = ModelConfig { granularity: g, ..base.clone() };
        let store = init_params::<f64>(&cfg, 1).unwrap();
        let mut pass = Pass::eval(&store);
        lm_logits(&cfg, &mut pass, &tokens).unwrap();
        assert_eq!(pass.trace.encoder, want, "{g}");
    }
}

#[test]
fn repeats_apply_blocks_with_shared_weights() {
    // Euler applied twice with one parameter set is RK2 with unit weights.
    let twice = ModelConfig { repeats: 2, ..ModelConfig::language_model(9, 8, 2) };
    let gamma_one = ModelConfig::language_model(9, 8, 2).with_variant(BlockVariant::Rk2GammaOne);
    let store = init_params::<f64>(&twice, 8).unwrap();
    let tokens = TokenBatch::from_rows(&[vec![1, 2, 3, 4]], None).unwrap();
    let run = |cfg: &ModelConfig| {
        let mut pass = Pass::eval(&store);
        let z = lm_logits(cfg, &mut pass, &tokens).unwrap();
        (pass.tape.data(z).unwrap().to_vec(), pass.trace.encoder.clone())
    };
    let (a, trace) = run(&twice);
    let (b, _) = run(&gamma_one);
    assert_eq!(trace, vec![1, 1, 1, 1]);
    assert_eq!(a, b);
}

#[test]
fn length_limits_are_enforced() {
    let cfg = ModelConfig { max_len: 3, ..small(BlockVariant::Euler) };
    let store = init_params::<f64>(&cfg, 1).unwrap();
    let err = encode_states(&cfg, &store, &source()).unwrap_err();
    assert_eq!(err, Error::Length { len: 4, max: 3 });

    let lm = ModelConfig { max_len: 3, ..ModelConfig::language_model(5, 8, 1) };
    let store = init_params::<f64>(&lm, 1).unwrap();
    let long = TokenBatch::from_rows(&[vec![1, 2, 3, 4, 0]], None).unwrap();
    assert!(matches!(lm_forward(&lm, &store, &long), Err(Error::Length { len: 4, max: 3 })));
}

#[test]
fn parameter_parity_at_depth_six() {
    let base = ModelConfig::encoder_decoder(32, 64, 6, 1);
    let euler = base.param_count();
    let extra = |v| base.clone().with_variant(v).param_count() - euler;
    assert_eq!(extra(BlockVariant::Rk2), 0);
    assert_eq!(extra(BlockVariant::Rk4), 0);
    assert_eq!(extra(BlockVariant::PolyNet), 0);
    assert_eq!(extra(BlockVariant::Rk2LearnableScalar), 6 * 2);
    assert_eq!(extra(BlockVariant::Rk2GatedSigmoidPair), 6 * (2 * 64 + 1));
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let cfg = ModelConfig::language_model(10, 8, 1);
    let mut store = init_params::<f64>(&cfg, 1).unwrap();
    zero_where(&mut store, |n| n == "lm.embed");
    let batch = TokenBatch::from_rows(&[vec![1, 2, 3, 4], vec![5, 6, 7, 8]], None).unwrap();
    let losses = lm_forward(&cfg, &store, &batch).unwrap();
    assert_eq!(losses.shape(), &[2, 3]);
    for &l in losses.data() {
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }
    assert!((perplexity(&losses, &batch).unwrap() - 10.0).abs() < 1e-9);
}

#[test]
fn single_token_vocabulary_has_unit_perplexity() {
    let cfg = ModelConfig::language_model(1, 8, 1);
    let store = init_params::<f64>(&cfg, 1).unwrap();
    let batch = TokenBatch::from_rows(&[vec![0, 0, 0]], None).unwrap();
    let losses = lm_forward(&cfg, &store, &batch).unwrap();
    assert!(losses.data().iter().all(|&l| l == 0.0));
    assert_eq!(perplexity(&losses, &batch).unwrap(), 1.0);
}

#[test]
fn greedy_decoding_edge_cases() {
    let cfg = small(BlockVariant::Rk2);
    let store = init_params::<f64>(&cfg, 9).unwrap();
    let empty = greedy_decode(&cfg, &store, &source(), 0).unwrap();
    assert_eq!(empty, vec![Vec::<usize>::new(); 2]);
    let a = greedy_decode(&cfg, &store, &source(), 6).unwrap();
    let b = greedy_decode(&cfg, &store, &source(), 6).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|o| o.len() <= 6 && !o.contains(&cfg.eos_id)));
}

#[test]
fn greedy_breaks_ties_toward_lowest_id() {
    // all-zero embeddings make every logit equal
    let cfg = small(BlockVariant::Euler);
    let mut store = init_params::<f64>(&cfg, 9).unwrap();
    zero_where(&mut store, |n| n == "dec.embed");
    let out = greedy_decode(&cfg, &store, &source(), 3).unwrap();
    assert_eq!(out, vec![vec![0, 0, 0]; 2]);
}

#[test]
fn f32_and_f64_models_agree() {
    let cfg = small(BlockVariant::Rk2);
    let a = init_params::<f64>(&cfg, 3).unwrap();
    let b: ParamStore<f32> = init_params(&cfg, 3).unwrap();
    let sa = encode_states(&cfg, &a, &source()).unwrap();
    let sb = encode_states(&cfg, &b, &source()).unwrap();
    let sb: Tensor<f64> = sb.cast();
    for (x, y) in sa.data().iter().zip(sb.data()) {
        assert!((x - y).abs() < 1e-4);
    }
}
