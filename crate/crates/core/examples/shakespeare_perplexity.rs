//! Trains a 2-layer model with softmax, Softmax + C + Mi and
//! Softmax + CPR:20,100 + Mi heads on Shakespeare and prints held-out
//! perplexity.
//!
//! Usage: `shakespeare_perplexity [steps] [d_model] [vocab_cap] [seeds]`

use std::env;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scpr::data::{load_corpus, tokenize, Vocab, SEQ_LEN};
use scpr::eval::perplexity;
use scpr::heads::{HeadConfig, HeadKind};
use scpr::model::Model;
use scpr::train::{AdamW, TrainConfig, TrainData, Trainer};
use scpr::transformer::ModelConfig;
use scpr::ParamStore;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> scpr::Result<()> {
    let (steps, d, cap, seeds): (u64, usize, usize, u64) = (arg(1, 2000), arg(2, 64), arg(3, 4000), arg(4, 1));
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/shakespeare");
    let train_docs = load_corpus(&dir.join("train.txt"))?;
    let valid_docs = load_corpus(&dir.join("valid.txt"))?;
    let vocab = Vocab::build(train_docs.iter().map(String::as_str), Some(cap))?;
    let train = tokenize(&train_docs, &vocab, SEQ_LEN)?;
    let valid = tokenize(&valid_docs, &vocab, SEQ_LEN)?;
    println!("vocab={} train_seqs={} train_tokens={} valid_tokens={}", vocab.len(), train.len(), train.num_targets(), valid.num_targets());
    let heads = [
        HeadConfig::new(HeadKind::Softmax, d),
        HeadConfig::new(HeadKind::C, d).with_mi(3, 3),
        HeadConfig::new(HeadKind::Cpr, d).with_mi(3, 3),
    ];
    for h in heads {
        for seed in 0..seeds {
            let mcfg = ModelConfig {
                vocab_size: vocab.len(),
                d_model: d,
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
                    warmup_steps: (steps / 10).min(1000),
                    ..AdamW::default()
                },
                batch_size: 4,
                steps,
                seed,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(model, store, tc)?;
            let start = Instant::now();
            t.run(&TrainData::Lm(train.seqs.clone()), &mut std::io::sink(), None)?;
            let secs = start.elapsed().as_secs_f64();
            let ppl = perplexity(&t.model, &t.store, &valid.seqs)?;
            println!("head={} seed={seed} valid_ppl={ppl:.3} train_secs={secs:.1}", h.label());
        }
    }
    Ok(())
}
