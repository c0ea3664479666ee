//! Trains softmax and CPR heads on analogy prompts that mention two corners
//! of a parallelogram (`king : queen :: man : woman`) and reports the exact
//! KL to the two-word target on the diagonal and edge splits.

use std::env;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scpr::data::{encode_record, generate_bundled, records_vocab, SyntheticSpec, TargetMode, Task};
use scpr::eval::synthetic_kl;
use scpr::heads::{HeadConfig, HeadKind};
use scpr::model::Model;
use scpr::train::{AdamW, TrainConfig, TrainData, Trainer};
use scpr::transformer::ModelConfig;
use scpr::ParamStore;

fn records(seed: u64, groups: usize) -> scpr::Result<Vec<scpr::data::Record>> {
    let mut out = Vec::new();
    for mode in [TargetMode::Diagonal, TargetMode::Edge] {
        let mut spec = SyntheticSpec::new(Task::Parallelogram, groups, seed);
        spec.target_mode = mode;
        out.extend(generate_bundled(&spec)?);
    }
    Ok(out)
}

fn main() -> scpr::Result<()> {
    let steps: u64 = env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let d: usize = env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(32);
    let train = records(1, 40)?;
    let test = records(2, 40)?;
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
            t.run(&TrainData::Records(train.clone()), &mut std::io::sink(), None)?;
            let kl = synthetic_kl(&t.model, &t.store, &test)?;
            println!("head={kind} seed={seed} diagonal={:.4} edge={:.4}", kl["diagonal"], kl["edge"]);
        }
    }
    Ok(())
}
