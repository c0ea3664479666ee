use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use scpr::eval::{generate_topk, inspect_topn, perplexity};
use scpr::heads::{HeadConfig, HeadKind, Target};
use scpr::model::{Batch, Model};
use scpr::train::{AdamW, TrainConfig, Trainer};
use scpr::transformer::{ModelConfig, BOS};
use scpr::{Graph, ParamStore};

fn cfg(vocab: usize, d: usize, seq2seq: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: d,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 24,
        seq2seq,
        tie_embeddings: true,
    }
}

/// A softmax model whose next-token distribution is `softmax(logits)` at
/// every position: the final norm outputs `e_0` and embedding column 0
/// holds the logits.
fn fixed_model(logits: &[f64]) -> (Model, ParamStore<f64>) {
    let d = 4;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = Model::new(cfg(logits.len(), d, false), HeadConfig::new(HeadKind::Softmax, d), &mut store, &mut rng).unwrap();
    let gamma = store.id("model.dec.ln_f.gamma").unwrap();
    store.get_mut(gamma).tensor.data_mut().fill(0.0);
    let beta = store.id("model.dec.ln_f.beta").unwrap();
    let b = store.get_mut(beta).tensor.data_mut();
    b.fill(0.0);
    b[0] = 1.0;
    let emb = store.id("model.tok_emb").unwrap();
    let e = store.get_mut(emb).tensor.data_mut();
    for (x, &l) in logits.iter().enumerate() {
        e[x * d..(x + 1) * d].copy_from_slice(&[l, 0.0, 0.0, 0.0]);
    }
    (m, store)
}

#[test]
fn uniform_predictor_perplexity_is_vocab_size() {
    let (m, store) = fixed_model(&[0.0; 7]);
    let ppl = perplexity(&m, &store, &[vec![BOS, 3, 4, 5], vec![BOS, 6, 2, 6]]).unwrap();
    assert!((ppl - 7.0).abs() < 1e-12, "{ppl}");
}

#[test]
fn hand_probability_toy() {
    let rest = (0.25f64 / 3.0).ln();
    let (m, store) = fixed_model(&[rest, rest, rest, 0.5f64.ln(), 0.25f64.ln()]);
    let ppl = perplexity(&m, &store, &[vec![BOS, 3, 4]]).unwrap();
    assert!((ppl - 8f64.sqrt()).abs() < 1e-12, "{ppl}");
}

#[test]
fn one_hot_predictor_has_unit_perplexity() {
    let mut logits = vec![0.0; 6];
    logits[4] = 200.0;
    let (m, store) = fixed_model(&logits);
    let ppl = perplexity(&m, &store, &[vec![BOS, 4, 4, 4]]).unwrap();
    assert!((ppl - 1.0).abs() < 1e-12, "{ppl}");
    assert!(perplexity(&m, &store, &[]).is_err());
}

fn random_model(kind: HeadKind, seed: u64) -> (Model, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Model::new(cfg(20, 8, false), HeadConfig::new(kind, 8).with_k(2, 4).with_mi(3, 3), &mut store, &mut rng).unwrap();
    (m, store)
}

#[test]
fn greedy_generation_matches_an_argmax_decoder() {
    for (i, kind) in [HeadKind::Softmax, HeadKind::Cpr, HeadKind::PointerGen].into_iter().enumerate() {
        let (m, store) = random_model(kind, i as u64);
        let prompt = vec![BOS, 5, 9, 5];
        let got = generate_topk(&m, &store, &prompt, 1, 12, 7).unwrap();
        let mut seq = prompt.clone();
        let mut want = Vec::new();
        for _ in 0..12 {
            let lp = m.log_probs(&store, &Batch::decoder_only(vec![seq.clone()])).unwrap();
            let last = lp.last().unwrap();
            let mut best = 0;
            for (x, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = x;
                }
            }
            seq.push(best);
            want.push(best);
        }
        assert_eq!(got, want, "{kind}");
    }
}

#[test]
fn sampling_is_reproducible_and_stops_at_max_len() {
    let (m, store) = random_model(HeadKind::Cpr, 3);
    let a = generate_topk(&m, &store, &[BOS, 4], 5, 10, 11).unwrap();
    assert_eq!(a, generate_topk(&m, &store, &[BOS, 4], 5, 10, 11).unwrap());
    let full = generate_topk(&m, &store, &[BOS, 4], 20, 100, 11).unwrap();
    assert_eq!(full.len(), 24 - 2);
}

#[test]
fn full_inspection_is_a_sorted_distribution() {
    let (m, store) = random_model(HeadKind::Cpr, 4);
    let top = inspect_topn(&m, &store, &[BOS, 6, 7], 20).unwrap();
    assert_eq!(top.len(), 20);
    assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
    assert!((top.iter().map(|t| t.1).sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn permuting_future_tokens_leaves_earlier_states_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seq2seq in [false, true] {
        let mut store = ParamStore::<f64>::new();
        let m = Model::new(cfg(30, 8, seq2seq), HeadConfig::new(HeadKind::Softmax, 8), &mut store, &mut rng).unwrap();
        for _ in 0..20 {
            let n = rng.random_range(3..12);
            let t = rng.random_range(1..n);
            let base: Vec<usize> = std::iter::once(BOS).chain((1..n).map(|_| rng.random_range(3..30))).collect();
            let mut other = base.clone();
            other[t..].shuffle(&mut rng);
            if let Some(x) = other.last_mut() {
                *x = 3 + (*x + 1) % 27;
            }
            let enc = vec![vec![4, 5, 6]];
            let mut g = Graph::inference();
            let run = |g: &mut Graph<f64>, s: Vec<usize>| {
                if seq2seq {
                    m.transformer.forward_encoder_decoder(g, &store, &enc, &[s]).unwrap().1
                } else {
                    m.transformer.forward_decoder(g, &store, &[s]).unwrap()
                }
            };
            let a = run(&mut g, base);
            let b = run(&mut g, other);
            for (&la, &lb) in a.layers.iter().zip(&b.layers) {
                assert_eq!(g.value(la).data()[..t * 8], g.value(lb).data()[..t * 8]);
            }
        }
    }
}

/// Encoder reads `x`, decoder reproduces it after BOS.
fn copy_batch(rng: &mut ChaCha8Rng, n: usize) -> (Batch, Vec<Target>) {
    let mut enc = Vec::new();
    let mut dec = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..n {
        let x: Vec<usize> = (0..5).map(|_| rng.random_range(3..12)).collect();
        dec.push(std::iter::once(BOS).chain(x[..4].iter().copied()).collect());
        targets.extend(x.iter().map(|&t| Target::Id(t)));
        enc.push(x);
    }
    (
        Batch {
            decoder: dec,
            encoder: Some(enc),
        },
        targets,
    )
}

#[test]
fn tiny_copy_task_is_learned() {
    for seed in 0..3 {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Model::new(cfg(12, 32, true), HeadConfig::new(HeadKind::Softmax, 32), &mut store, &mut rng).unwrap();
        let tc = TrainConfig {
            opt: AdamW {
                lr: 3e-3,
                warmup_steps: 100,
                ..AdamW::default()
            },
            batch_size: 16,
            steps: 2000,
            seed,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(m, store, tc).unwrap();
        let (held, held_t) = copy_batch(&mut ChaCha8Rng::seed_from_u64(1000 + seed), 64);
        let mut nll = f64::INFINITY;
        for step in 1..=2000 {
            let (b, tg) = copy_batch(&mut rng, 16);
            t.step_on(&b, &tg).unwrap();
            if step % 100 == 0 {
                nll = t.eval_loss(&held, &held_t).unwrap();
                if nll < 0.1 {
                    break;
                }
            }
        }
        assert!(nll < 0.1, "seed {seed}: held-out NLL {nll}");
    }
}
