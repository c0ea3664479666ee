//! End-to-end acceptance suite. Runs every criterion, prints one
//! `PASS`/`FAIL` line each, and exits nonzero if any failed.
//!
//! Extra arguments filter criteria by substring, e.g.
//! `cargo test --test acceptance -- bottleneck`.

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use scpr::bench::{bench_one, head_macs, BenchSpec};
use scpr::data::{encode_record, generate_bundled, load_corpus, records_vocab, tokenize, EncodedRecord, Record, SyntheticSpec, TargetMode, Task, Vocab, SEQ_LEN};
use scpr::eval::{kl_divergence, perplexity, repeat_prob, synthetic_kl};
use scpr::gradcheck::{grad_check, GradCheckOptions};
use scpr::heads::{head_nll, EncoderInput, HeadConfig, HeadInput, HeadKind, HeadOutput, OutputHead, Target};
use scpr::model::{Batch, Model};
use scpr::partition::{build_cepr_partition, build_cpr_partition, Branch};
use scpr::train::checkpoint::{checkpoint_entries, encode};
use scpr::train::{adamw_step, load_checkpoint, save_checkpoint, AdamState, AdamW, TrainConfig, TrainData, Trainer};
use scpr::transformer::{ModelConfig, SeqLayout, BOS};
use scpr::{Graph, ParamStore, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn tiny_model(vocab: usize, d: usize, layers: usize, seq2seq: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: d,
        n_layers: layers,
        n_heads: 2,
        max_seq_len: 32,
        seq2seq,
        tie_embeddings: true,
    }
}

fn random_seq(rng: &mut ChaCha8Rng, len: usize, vocab: usize, bos: bool) -> Vec<usize> {
    let mut s: Vec<usize> = (0..len).map(|_| rng.random_range(3..vocab)).collect();
    if bos {
        s[0] = BOS;
    }
    s
}

fn perturb(store: &mut ParamStore<f64>, prefix: &str, std: f64, rng: &mut ChaCha8Rng) {
    let noise = Normal::new(0.0, std).unwrap();
    let ids: Vec<_> = store.ids().filter(|id| store.get(*id).name.starts_with(prefix)).collect();
    for id in ids {
        for v in store.get_mut(id).tensor.data_mut() {
            *v += noise.sample(rng);
        }
    }
}

// ---------------------------------------------------------------------------
// 1. Freshly initialized partitioned heads reproduce the softmax logits.

fn init_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut worst_label = String::new();
    for m in 0..100u64 {
        let vocab = rng.random_range(8..=200);
        let d = [8, 16, 32, 64][rng.random_range(0..4)];
        let layers = rng.random_range(1..=2);
        let use_mi = rng.random_bool(0.5);
        let lens: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=12)).collect();
        let dec: Vec<Vec<usize>> = lens.iter().map(|&n| random_seq(&mut rng, n, vocab, true)).collect();
        let enc: Vec<Vec<usize>> = lens.iter().map(|_| {
            let n = rng.random_range(1..=10);
            random_seq(&mut rng, n, vocab, false)
        }).collect();
        let heads = [
            HeadConfig::new(HeadKind::C, d),
            HeadConfig::new(HeadKind::R, d).with_k(20, 100),
            HeadConfig::new(HeadKind::P, d),
            HeadConfig::new(HeadKind::Cpr, d).with_k(20, 100),
            HeadConfig::new(HeadKind::Cepr, d).with_k(20, 0),
        ];
        for h in heads {
            let seq2seq = h.kind == HeadKind::Cepr;
            let mut h = h;
            if use_mi {
                h = h.with_mi(layers + 1, 3);
            }
            let batch = Batch {
                decoder: dec.clone(),
                encoder: seq2seq.then(|| enc.clone()),
            };
            let logits = |cfg: HeadConfig| -> Tensor<f64> {
                let mut store = ParamStore::<f64>::new();
                let mut r = ChaCha8Rng::seed_from_u64(1000 + m);
                let model = Model::new(tiny_model(vocab, d, layers, seq2seq), cfg, &mut store, &mut r).unwrap();
                let mut g = Graph::inference();
                match model.forward(&mut g, &store, &batch).unwrap() {
                    HeadOutput::Logits(v) => g.value(v).clone(),
                    HeadOutput::Probs(_) => panic!("{} returned probabilities", model.head.cfg.label()),
                }
            };
            let base = logits(HeadConfig::new(HeadKind::Softmax, d));
            let got = logits(h.clone());
            let diff = got.max_abs_diff(&base).unwrap();
            if diff > worst {
                worst = diff;
                worst_label = h.label();
            }
        }
    }
    check(worst <= 1e-5, format!("max |dlogit| = {worst:.3e} over 100 models x 5 heads (worst {worst_label}; tol 1e-5)"))
}

// ---------------------------------------------------------------------------
// 2. Partition builders against an exhaustive per-id case evaluator.

/// Whether `x` ranks among the `k` largest of `s`, ties to the smaller id.
fn in_topk(s: &[f64], x: usize, k: usize) -> bool {
    let above = (0..s.len()).filter(|&y| s[y] > s[x] || (s[y] == s[x] && y < x)).count();
    above < k
}

fn random_scores(rng: &mut ChaCha8Rng, v: usize) -> Vec<f64> {
    // Coarse integer scores force ties.
    if rng.random_bool(0.5) {
        (0..v).map(|_| rng.random_range(-3..=3) as f64).collect()
    } else {
        (0..v).map(|_| rng.random_range(-5.0..5.0)).collect()
    }
}

fn random_ids(rng: &mut ChaCha8Rng, v: usize) -> Vec<usize> {
    (0..rng.random_range(0..=v.min(12))).map(|_| rng.random_range(0..v)).collect()
}

fn partition_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut mismatches = 0usize;
    for _ in 0..1000 {
        let v = rng.random_range(1..=50);
        let lv = random_scores(&mut rng, v);
        let lr2 = random_scores(&mut rng, v);
        let ctx = random_ids(&mut rng, v);
        let k2 = rng.random_range(0..=v + 2);
        let k1 = rng.random_range(0..=k2);
        let p = build_cpr_partition(&lv, Some(&lr2[..]), &ctx, k1, k2).map_err(|e| e.to_string())?;
        let m: Vec<f64> = lv.iter().zip(&lr2).map(|(a, b)| a.max(*b)).collect();
        for x in 0..v {
            let expect = if ctx.contains(&x) {
                Branch::Context
            } else if k1 > 0 && in_topk(&m, x, k1) {
                Branch::Rerank1
            } else if in_topk(&lv, x, k2) {
                Branch::Rerank2
            } else {
                Branch::Default
            };
            mismatches += usize::from(p.branch[x] != expect);
        }
    }
    for _ in 0..1000 {
        let v = rng.random_range(1..=50);
        let lv = random_scores(&mut rng, v);
        let ctx = random_ids(&mut rng, v);
        let enc = random_ids(&mut rng, v);
        let k1 = rng.random_range(0..=v + 2);
        let p = build_cepr_partition(&lv, &ctx, &enc, k1).map_err(|e| e.to_string())?;
        for x in 0..v {
            let expect = if ctx.contains(&x) {
                Branch::Context
            } else if enc.contains(&x) {
                Branch::Encoder
            } else if in_topk(&lv, x, k1) {
                Branch::Rerank1
            } else {
                Branch::Default
            };
            mismatches += usize::from(p.branch[x] != expect);
        }
    }
    check(mismatches == 0, format!("{mismatches} branch mismatches over 1000 cpr + 1000 cepr instances"))
}

// ---------------------------------------------------------------------------
// 3. Central differences through every head's NLL, whole model included.

fn gradient_suite() -> Outcome {
    const V: usize = 16;
    let mut configs = Vec::new();
    for kind in HeadKind::ALL {
        if kind == HeadKind::Cepr {
            continue;
        }
        configs.push((HeadConfig::new(kind, 8).with_k(2, 5), false));
        if !kind.mixes_probabilities() {
            configs.push((HeadConfig::new(kind, 8).with_k(2, 5).with_mi(3, 2), false));
        }
    }
    for kind in [HeadKind::Cepr, HeadKind::CopyNet, HeadKind::PointerGen, HeadKind::PointerSentinel] {
        configs.push((HeadConfig::new(kind, 8).with_k(3, 3), true));
    }
    configs.push((HeadConfig::new(HeadKind::Cepr, 8).with_k(3, 3).with_mi(1, 2), true));
    let mut worst = 0.0f64;
    let mut worst_label = String::new();
    let mut failed = Vec::new();
    for (i, (h, seq2seq)) in configs.into_iter().enumerate() {
        let label = h.label();
        let mut rng = ChaCha8Rng::seed_from_u64(300 + i as u64);
        let mut store = ParamStore::<f64>::new();
        let model = Model::new(tiny_model(V, 8, 2, seq2seq), h, &mut store, &mut rng).map_err(|e| e.to_string())?;
        perturb(&mut store, "head.", 0.3, &mut rng);
        let dec = vec![vec![BOS, 5, 7, 5, 9], vec![BOS, 3, 3]];
        let batch = Batch {
            decoder: dec.clone(),
            encoder: seq2seq.then(|| vec![vec![4, 7, 11], vec![6, 3]]),
        };
        let mut targets: Vec<Target> = (0..8).map(|_| Target::Id(rng.random_range(3..V))).collect();
        targets[2] = Target::Dist(vec![(5, 0.25), (7, 0.5), (12, 0.25)]);
        targets[7] = Target::Ignore;
        let report = grad_check(
            &mut store,
            |g, s| {
                let out = model.forward(g, s, &batch)?;
                head_nll(g, out, &targets)
            },
            GradCheckOptions {
                eps: 3e-5,
                five_point: true,
                ..GradCheckOptions::default()
            },
        )
        .map_err(|e| format!("{label}: {e}"))?;
        if report.max_rel_err > worst {
            worst = report.max_rel_err;
            worst_label = label.clone();
        }
        if !report.passed {
            failed.push(format!("{label} at {:?}", report.worst));
        }
    }
    check(
        failed.is_empty() && worst <= 1e-6,
        format!("max rel err = {worst:.3e} (worst {worst_label}; tol 1e-6){}", if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }),
    )
}

// ---------------------------------------------------------------------------
// 4. One hidden state cannot put half its mass on each of two opposite
// corners of the parallelogram; the context partition can.

const KING: usize = 1;
const WOMAN: usize = 2;
/// man, king, woman, queen.
const CORNERS: [[f64; 2]; 4] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];

/// KL of the {king, woman} target against `softmax(E h)`, in plain f64.
fn corner_kl(h: [f64; 2]) -> f64 {
    let l: Vec<f64> = CORNERS.iter().map(|e| e[0] * h[0] + e[1] * h[1]).collect();
    let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + l.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
    0.5 * (0.5f64.ln() - (l[KING] - lse)) + 0.5 * (0.5f64.ln() - (l[WOMAN] - lse))
}

/// Dense grid then plain gradient descent from the best grid point.
fn corner_oracle() -> f64 {
    let mut best = ([0.0, 0.0], f64::INFINITY);
    let n = 801;
    for i in 0..n {
        for j in 0..n {
            let h = [-20.0 + 40.0 * i as f64 / (n - 1) as f64, -20.0 + 40.0 * j as f64 / (n - 1) as f64];
            let l = corner_kl(h);
            if l < best.1 {
                best = (h, l);
            }
        }
    }
    let mut h = best.0;
    for _ in 0..20_000 {
        let eps = 1e-6;
        let gx = (corner_kl([h[0] + eps, h[1]]) - corner_kl([h[0] - eps, h[1]])) / (2.0 * eps);
        let gy = (corner_kl([h[0], h[1] + eps]) - corner_kl([h[0], h[1] - eps])) / (2.0 * eps);
        h = [h[0] - 0.5 * gx, h[1] - 0.5 * gy];
    }
    corner_kl(h).min(best.1)
}

/// Trains `head` plus a free hidden state on the single target row and
/// returns the final KL.
fn fit_corners(kind: HeadKind, steps: usize) -> scpr::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let rows: Vec<Vec<f64>> = CORNERS.iter().map(|e| e.to_vec()).collect();
    let emb = store.insert("emb", Tensor::from_rows(&rows)?)?;
    store.set_trainable(emb, false);
    let hidden = store.insert_normal("hidden", &[2, 2], 0.5, &mut rng)?;
    let head = OutputHead::new(HeadConfig::new(kind, 2).with_k(1, 2), emb, false, &mut store, &mut rng)?;
    let tokens = vec![vec![KING, WOMAN]];
    let layout = SeqLayout::from_lens(&[2]);
    let truth = vec![(KING, 0.5), (WOMAN, 0.5)];
    let targets = vec![Target::Ignore, Target::Dist(truth.clone())];
    let opt = AdamW {
        lr: 0.05,
        warmup_steps: 0,
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let mut state = AdamState::new(&store);
    let forward = |g: &mut Graph<f64>, store: &ParamStore<f64>| -> scpr::Result<HeadOutput> {
        let h = g.param(store, hidden);
        let input = HeadInput {
            hidden: h,
            block: None,
            layout: &layout,
            tokens: &tokens,
            encoder: None,
            special: &[],
        };
        head.forward(g, store, &input)
    };
    for _ in 0..steps {
        let mut g = Graph::new();
        let out = forward(&mut g, &store)?;
        let loss = head_nll(&mut g, out, &targets)?;
        let grads = g.backward(loss)?.param_grads();
        drop(g);
        adamw_step(&mut store, &grads, &mut state, &opt)?;
    }
    let mut g = Graph::inference();
    let out = forward(&mut g, &store)?;
    let p = out.probs(&mut g)?;
    let row: Vec<f64> = g.value(p).row(1).to_vec();
    kl_divergence(&truth, &row)
}

fn bottleneck() -> Outcome {
    let l_star = corner_oracle();
    let softmax = fit_corners(HeadKind::Softmax, 1000).map_err(|e| e.to_string())?;
    let cpr = fit_corners(HeadKind::Cpr, 1000).map_err(|e| e.to_string())?;
    check(
        l_star > 0.0 && softmax >= l_star - 1e-9 && cpr <= 1e-2,
        format!("L* = {l_star:.6} (ln 2 = {:.6}); softmax KL = {softmax:.6} >= L*; cpr KL = {cpr:.2e} (tol 1e-2)", std::f64::consts::LN_2),
    )
}

// ---------------------------------------------------------------------------
// Shared training for the synthetic tasks.

fn encode_all(train: &[Record], test: &[Record]) -> scpr::Result<(Vec<EncodedRecord>, Vec<EncodedRecord>, Vocab)> {
    let mut all = train.to_vec();
    all.extend(test.iter().cloned());
    let vocab = records_vocab(&all)?;
    let enc = |rs: &[Record]| rs.iter().map(|r| encode_record(r, &vocab)).collect::<Vec<_>>();
    Ok((enc(train), enc(test), vocab))
}

fn train_records(kind: HeadKind, vocab: usize, train: &[EncodedRecord], seed: u64) -> scpr::Result<Trainer<f32>> {
    let d = 32;
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(tiny_model(vocab, d, 2, false), HeadConfig::new(kind, d), &mut store, &mut rng)?;
    let tc = TrainConfig {
        opt: AdamW {
            lr: 3e-3,
            warmup_steps: 100,
            ..AdamW::default()
        },
        batch_size: 16,
        steps: 1500,
        seed,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model, store, tc)?;
    t.run(&TrainData::Records(train.to_vec()), &mut std::io::sink(), None)?;
    Ok(t)
}

// ---------------------------------------------------------------------------
// 5. Listed words are not repeated.

fn donut() -> Outcome {
    let run = || -> scpr::Result<(Vec<f64>, Vec<f64>, usize)> {
        let train = generate_bundled(&SyntheticSpec::new(Task::ListCompletion, 200, 1))?;
        let test = generate_bundled(&SyntheticSpec::new(Task::ListCompletion, 50, 2))?;
        let (train, test, vocab) = encode_all(&train, &test)?;
        let mut out = (Vec::new(), Vec::new());
        for seed in 0..3 {
            let s = train_records(HeadKind::Softmax, vocab.len(), &train, seed)?;
            out.0.push(repeat_prob(&s.model, &s.store, &test)?);
            let c = train_records(HeadKind::Cpr, vocab.len(), &train, seed)?;
            out.1.push(repeat_prob(&c.model, &c.store, &test)?);
        }
        Ok((out.0, out.1, vocab.len()))
    };
    let (soft, cpr, v) = run().map_err(|e| e.to_string())?;
    let (ms, mc) = (median(soft.clone()), median(cpr.clone()));
    check(
        mc <= 0.5 * ms,
        format!("median repeat_prob cpr = {mc:.4} vs softmax = {ms:.4} (need <= 0.5x); V = {v}; per-seed softmax {soft:.4?} cpr {cpr:.4?}"),
    )
}

// ---------------------------------------------------------------------------
// 6. Held-out perplexity ordering on Shakespeare.

const LM_STEPS: u64 = 1500;
const LM_D: usize = 64;
const LM_VOCAB_CAP: usize = 4000;

fn train_lm(h: &HeadConfig, vocab: usize, train: &[Vec<usize>], seed: u64) -> scpr::Result<Trainer<f32>> {
    let mcfg = ModelConfig {
        vocab_size: vocab,
        d_model: LM_D,
        n_layers: 2,
        n_heads: 4,
        max_seq_len: SEQ_LEN,
        seq2seq: false,
        tie_embeddings: true,
    };
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(mcfg, h.clone(), &mut store, &mut rng)?;
    let tc = TrainConfig {
        opt: AdamW {
            lr: 2e-3,
            warmup_steps: LM_STEPS / 10,
            ..AdamW::default()
        },
        batch_size: 4,
        steps: LM_STEPS,
        seed,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model, store, tc)?;
    t.run(&TrainData::Lm(train.to_vec()), &mut std::io::sink(), None)?;
    Ok(t)
}

fn perplexity_ordering() -> Outcome {
    let run = || -> scpr::Result<Vec<(String, Vec<f64>)>> {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/shakespeare");
        let train_docs = load_corpus(&dir.join("train.txt"))?;
        let valid_docs = load_corpus(&dir.join("valid.txt"))?;
        let vocab = Vocab::build(train_docs.iter().map(String::as_str), Some(LM_VOCAB_CAP))?;
        let train = tokenize(&train_docs, &vocab, SEQ_LEN)?;
        let valid = tokenize(&valid_docs, &vocab, SEQ_LEN)?;
        let heads = [
            HeadConfig::new(HeadKind::Softmax, LM_D),
            HeadConfig::new(HeadKind::C, LM_D).with_mi(3, 3),
            HeadConfig::new(HeadKind::Cpr, LM_D).with_k(20, 100).with_mi(3, 3),
        ];
        let mut out = Vec::new();
        for h in heads {
            let mut ppl = Vec::new();
            for seed in 0..3 {
                let t = train_lm(&h, vocab.len(), &train.seqs, seed)?;
                ppl.push(perplexity(&t.model, &t.store, &valid.seqs)?);
            }
            out.push((h.label(), ppl));
        }
        Ok(out)
    };
    let res = run().map_err(|e| e.to_string())?;
    let med: Vec<f64> = res.iter().map(|(_, p)| median(p.clone())).collect();
    let detail = res
        .iter()
        .zip(&med)
        .map(|((l, p), m)| format!("{l} median {m:.2} {p:.2?}"))
        .collect::<Vec<_>>()
        .join("; ");
    check(med[2] < med[0] && med[1] < med[0], format!("valid ppl: {detail}"))
}

// ---------------------------------------------------------------------------
// 7. Parallelogram records: both corners of a diagonal.

fn analogy_records(seed: u64) -> scpr::Result<Vec<Record>> {
    let mut out = Vec::new();
    for mode in [TargetMode::Diagonal, TargetMode::Edge] {
        let mut spec = SyntheticSpec::new(Task::Parallelogram, 40, seed);
        spec.target_mode = mode;
        out.extend(generate_bundled(&spec)?);
    }
    Ok(out)
}

fn analogy_kl() -> Outcome {
    let run = || -> scpr::Result<(Vec<f64>, Vec<f64>)> {
        let (train, test, vocab) = encode_all(&analogy_records(1)?, &analogy_records(2)?)?;
        let mut out = (Vec::new(), Vec::new());
        for seed in 0..3 {
            let s = train_records(HeadKind::Softmax, vocab.len(), &train, seed)?;
            out.0.push(synthetic_kl(&s.model, &s.store, &test)?["diagonal"]);
            let c = train_records(HeadKind::Cpr, vocab.len(), &train, seed)?;
            out.1.push(synthetic_kl(&c.model, &c.store, &test)?["diagonal"]);
        }
        Ok(out)
    };
    let (soft, cpr) = run().map_err(|e| e.to_string())?;
    let (ms, mc) = (median(soft.clone()), median(cpr.clone()));
    check(mc < ms, format!("median diagonal KL cpr = {mc:.4} vs softmax = {ms:.4}; per-seed softmax {soft:.4?} cpr {cpr:.4?}"))
}

// ---------------------------------------------------------------------------
// 8. Probability-mixing heads emit normalized rows.

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst = 0.0f64;
    let mut count = 0usize;
    for kind in [HeadKind::Mos, HeadKind::CopyNet, HeadKind::PointerGen, HeadKind::PointerSentinel] {
        for i in 0..1000 {
            let vocab = rng.random_range(4..=60);
            let d = rng.random_range(1..=12);
            let seq2seq = kind != HeadKind::Mos && i % 2 == 1;
            let mut store = ParamStore::<f64>::new();
            let emb = store.insert_normal("emb", &[vocab, d], 2.0, &mut rng).unwrap();
            let mut cfg = HeadConfig::new(kind, d);
            cfg.mos_components = rng.random_range(1..=4);
            cfg.copy_bias = rng.random_range(-20.0..5.0);
            cfg.ptr_bias = rng.random_range(-5.0..5.0);
            let head = OutputHead::new(cfg, emb, seq2seq, &mut store, &mut rng).unwrap();
            perturb(&mut store, "head.", 1.0, &mut rng);
            let lens: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=8)).collect();
            let tokens: Vec<Vec<usize>> = lens.iter().map(|&n| (0..n).map(|_| rng.random_range(0..vocab)).collect()).collect();
            let layout = SeqLayout::from_lens(&lens);
            let enc_lens: Vec<usize> = lens.iter().map(|_| rng.random_range(1..=6)).collect();
            let enc_tokens: Vec<Vec<usize>> = enc_lens.iter().map(|&n| (0..n).map(|_| rng.random_range(0..vocab)).collect()).collect();
            let enc_layout = SeqLayout::from_lens(&enc_lens);
            let scale = rng.random_range(0.1..10.0);
            let mut g = Graph::<f64>::inference();
            let hidden = g.constant(Tensor::from_fn(&[layout.total(), d], |_| scale * normal.sample(&mut rng)));
            let enc_states = g.constant(Tensor::from_fn(&[enc_layout.total(), d], |_| scale * normal.sample(&mut rng)));
            let input = HeadInput {
                hidden,
                block: None,
                layout: &layout,
                tokens: &tokens,
                encoder: seq2seq.then_some(EncoderInput {
                    states: enc_states,
                    layout: &enc_layout,
                    tokens: &enc_tokens,
                }),
                special: &[BOS],
            };
            let out = head.forward(&mut g, &store, &input).map_err(|e| format!("{kind}: {e}"))?;
            let p = out.probs(&mut g).map_err(|e| e.to_string())?;
            let t = g.value(p);
            for r in 0..t.rows() {
                let row = t.row(r);
                if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
                    return Err(format!("{kind}: invalid probability row"));
                }
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
            count += 1;
        }
    }
    check(worst <= 1e-6, format!("max |sum - 1| = {worst:.3e} over {count} random inputs (tol 1e-6)"))
}

// ---------------------------------------------------------------------------
// 9. CPR is cheaper than a three-component mixture of softmaxes.

fn efficiency() -> Outcome {
    let (v, d, ctx) = (10_000, 128, 200);
    let cpr = HeadConfig::new(HeadKind::Cpr, d).with_k(20, 100);
    let mos = HeadConfig::new(HeadKind::Mos, d);
    let (fc, fm) = (head_macs(&cpr, v, ctx, 0), head_macs(&mos, v, ctx, 0));
    let spec = BenchSpec {
        reps: 30,
        ..BenchSpec::default()
    };
    let rc = bench_one(&spec, &cpr, v).map_err(|e| e.to_string())?;
    let rm = bench_one(&spec, &mos, v).map_err(|e| e.to_string())?;
    check(
        fc < fm && rc.median_us < rm.median_us,
        format!(
            "MACs/position cpr = {fc} < mos = {fm}; median over {} reps cpr = {:.0} us vs mos = {:.0} us",
            spec.reps, rc.median_us, rm.median_us
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Save, load, save, and resume.

fn lm_trainer(seed: u64, init_seed: u64, steps: u64) -> Trainer<f32> {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let model = Model::new(tiny_model(24, 16, 2, false), HeadConfig::new(HeadKind::Cpr, 16).with_k(2, 5).with_mi(3, 3), &mut store, &mut rng).unwrap();
    let tc = TrainConfig {
        opt: AdamW {
            lr: 1e-2,
            warmup_steps: 5,
            ..AdamW::default()
        },
        batch_size: 4,
        steps,
        seed,
        ..TrainConfig::default()
    };
    Trainer::new(model, store, tc).unwrap()
}

fn checkpoint_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let seqs: Vec<Vec<usize>> = (0..32).map(|_| random_seq(&mut rng, 12, 24, true)).collect();
    let data = TrainData::Lm(seqs);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    let (total, cut) = (30u64, 12u64);

    let mut full = lm_trainer(5, 1, total);
    let full_logs = full.run(&data, &mut std::io::sink(), None).map_err(|e| e.to_string())?;

    let mut first = lm_trainer(5, 1, cut);
    first.run(&data, &mut std::io::sink(), Some(&path)).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;

    let mut resumed = lm_trainer(5, 99, total);
    resumed.state = load_checkpoint(&path, &mut resumed.store).map_err(|e| e.to_string())?;
    let again = encode(&checkpoint_entries(&resumed.store, &resumed.state));
    let identical = again == bytes;
    let path2 = dir.path().join("again.ckpt");
    save_checkpoint(&path2, &resumed.store, &resumed.state).map_err(|e| e.to_string())?;
    let identical = identical && std::fs::read(&path2).map_err(|e| e.to_string())? == bytes;

    let rest = resumed.run(&data, &mut std::io::sink(), None).map_err(|e| e.to_string())?;
    let resume_gap = (rest[0].loss - full_logs[cut as usize].loss).abs();
    let max_gap = rest
        .iter()
        .zip(&full_logs[cut as usize..])
        .map(|(a, b)| (a.loss - b.loss).abs())
        .fold(0.0, f64::max);
    check(
        identical && rest[0].step == cut + 1 && resume_gap <= 1e-6,
        format!(
            "save-load-save byte identical: {identical} ({} bytes); loss gap at resumed step {} = {resume_gap:.2e} (tol 1e-6), max over remaining {} steps = {max_gap:.2e}",
            bytes.len(),
            cut + 1,
            rest.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("init_equivalence", init_equivalence),
        ("partition_oracle", partition_oracle),
        ("gradient_suite", gradient_suite),
        ("bottleneck", bottleneck),
        ("donut_repetition", donut),
        ("perplexity_ordering", perplexity_ordering),
        ("analogy_diagonal_kl", analogy_kl),
        ("head_normalization", normalization),
        ("efficiency_ordering", efficiency),
        ("checkpoint_round_trip", checkpoint_round_trip),
    ];
    let filters: BTreeSet<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {:>2} {name}: PASS ({secs:.1}s) {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({secs:.1}s) {d}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
