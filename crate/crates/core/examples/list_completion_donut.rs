//! Trains softmax and CPR heads on list-completion prompts ("I like tennis ,
//! golf , ... , and") and compares the probability mass each puts back on
//! the listed words.

use std::env;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scpr::data::{encode_record, generate_bundled, records_vocab, SyntheticSpec, Task};
use scpr::eval::repeat_prob;
use scpr::heads::{HeadConfig, HeadKind};
use scpr::model::Model;
use scpr::train::{AdamW, TrainConfig, TrainData, Trainer};
use scpr::transformer::ModelConfig;
use scpr::ParamStore;

fn main() -> scpr::Result<()> {
    let steps: u64 = env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let d: usize = env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(32);
    let train = generate_bundled(&SyntheticSpec::new(Task::ListCompletion, 200, 1))?;
    let test = generate_bundled(&SyntheticSpec::new(Task::ListCompletion, 50, 2))?;
    let mut all = train.clone();
    all.extend(test.iter().cloned());
    let vocab = records_vocab(&all)?;
    let enc = |rs: &[scpr::data::Record]| rs.iter().map(|r| encode_record(r, &vocab)).collect::<Vec<_>>();
    let (train, test) = (enc(&train), enc(&test));
    println!("vocab={} train={} test={}", vocab.len(), train.len(), test.len());
    for kind in [HeadKind::Softmax, HeadKind::Cpr] {
        for seed in 0..3 {
            let mcfg = ModelConfig {
                vocab_size: vocab.len(),
                d_model: d,
                n_layers: 2,
                n_heads: 2,
                max_seq_len: 32,
                seq2seq: false,
                tie_embeddings: true,
            };
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = Model::new(mcfg, HeadConfig::new(kind, d), &mut store, &mut rng)?;
            let tc = TrainConfig {
                opt: AdamW {
                    lr: 3e-3,
                    warmup_steps: 100,
                    ..AdamW::default()
                },
                batch_size: 16,
                steps,
                seed,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(model, store, tc)?;
            let start = std::time::Instant::now();
            t.run(&TrainData::Records(train.clone()), &mut std::io::sink(), None)?;
            let rp = repeat_prob(&t.model, &t.store, &test)?;
            let kl = scpr::eval::synthetic_kl(&t.model, &t.store, &test)?;
            println!("head={} seed={seed} repeat_prob={rp:.4} kl={:.4} secs={:.1}", kind, kl["list"], start.elapsed().as_secs_f64());
        }
    }
    Ok(())
}
