//! Trains softmax and CPR heads on "I pick up the ..." choice prompts, then
//! prints each model's top-5 next words and a top-K sample for one held-out
//! prompt.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scpr::data::{encode_record, generate_bundled, records_vocab, SyntheticSpec, Task};
use scpr::eval::{generate_topk, inspect_topn};
use scpr::heads::{HeadConfig, HeadKind};
use scpr::model::Model;
use scpr::train::{AdamW, TrainConfig, TrainData, Trainer};
use scpr::transformer::ModelConfig;
use scpr::ParamStore;

fn main() -> scpr::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(800);
    let train = generate_bundled(&SyntheticSpec::new(Task::Choice, 150, 1))?;
    let test = generate_bundled(&SyntheticSpec::new(Task::Choice, 5, 2))?;
    let mut all = train.clone();
    all.extend(test.iter().cloned());
    let vocab = records_vocab(&all)?;
    let encoded: Vec<_> = train.iter().map(|r| encode_record(r, &vocab)).collect();
    let prompt = encode_record(&test[0], &vocab).context;
    println!("prompt: {}", test[0].context.join(" "));
    for kind in [HeadKind::Softmax, HeadKind::Cpr] {
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 40,
            seq2seq: false,
            tie_embeddings: true,
        };
        let mut store = ParamStore::<f32>::new();
        let model = Model::new(cfg, HeadConfig::new(kind, 32), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
        let tc = TrainConfig {
            opt: AdamW {
                lr: 3e-3,
                warmup_steps: 50,
                ..AdamW::default()
            },
            batch_size: 16,
            steps,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, store, tc)?;
        t.run(&TrainData::Records(encoded.clone()), &mut std::io::sink(), None)?;
        let top: Vec<String> = inspect_topn(&t.model, &t.store, &prompt, 5)?.into_iter().map(|(i, p)| format!("{}={p:.3}", vocab.word(i))).collect();
        let sample = generate_topk(&t.model, &t.store, &prompt, 5, 3, 0)?;
        println!("{:<8} top5: {}", kind.name(), top.join(" "));
        println!("{:<8} sample: {}", "", vocab.decode(&sample));
    }
    Ok(())
}
