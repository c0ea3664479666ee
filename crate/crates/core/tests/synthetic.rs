use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scpr::data::{encode_record, generate_bundled, records_vocab, SyntheticSpec, Task};
use scpr::eval::inspect_topn;
use scpr::heads::{HeadConfig, HeadKind};
use scpr::model::Model;
use scpr::train::{AdamW, TrainConfig, TrainData, Trainer};
use scpr::transformer::ModelConfig;
use scpr::ParamStore;

#[test]
fn trained_cpr_lists_every_mentioned_object_in_its_top_five() {
    let train = generate_bundled(&SyntheticSpec::new(Task::Choice, 150, 1)).unwrap();
    let test = generate_bundled(&SyntheticSpec::new(Task::Choice, 5, 2)).unwrap();
    let mut all = train.clone();
    all.extend(test.iter().cloned());
    let vocab = records_vocab(&all).unwrap();
    let encoded: Vec<_> = train.iter().map(|r| encode_record(r, &vocab)).collect();
    for seed in 0..3 {
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
        let model = Model::new(cfg, HeadConfig::new(HeadKind::Cpr, 32), &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let tc = TrainConfig {
            opt: AdamW {
                lr: 3e-3,
                warmup_steps: 50,
                ..AdamW::default()
            },
            batch_size: 16,
            steps: 800,
            seed,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, store, tc).unwrap();
        t.run(&TrainData::Records(encoded.clone()), &mut std::io::sink(), None).unwrap();
        for r in &test {
            let e = encode_record(r, &vocab);
            let top: Vec<usize> = inspect_topn(&t.model, &t.store, &e.context, 5).unwrap().into_iter().map(|(i, _)| i).collect();
            for (x, _) in &e.target {
                assert!(top.contains(x), "seed {seed}: `{}` missing from top-5 for `{}`", vocab.word(*x), r.context.join(" "));
            }
        }
    }
}
