//! Trains for a few steps, checkpoints, resumes in a fresh process-like
//! state and shows the loss trajectory continuing exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scpr::heads::{HeadConfig, HeadKind};
use scpr::model::Model;
use scpr::train::{load_checkpoint, AdamW, TrainConfig, TrainData, Trainer};
use scpr::transformer::{ModelConfig, BOS};
use scpr::ParamStore;

fn trainer(init_seed: u64, steps: u64) -> scpr::Result<Trainer<f32>> {
    let cfg = ModelConfig {
        vocab_size: 30,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 16,
        seq2seq: false,
        tie_embeddings: true,
    };
    let mut store = ParamStore::new();
    let model = Model::new(cfg, HeadConfig::new(HeadKind::Cpr, 16).with_k(2, 6), &mut store, &mut ChaCha8Rng::seed_from_u64(init_seed))?;
    let tc = TrainConfig {
        opt: AdamW {
            lr: 5e-3,
            warmup_steps: 5,
            ..AdamW::default()
        },
        steps,
        seed: 1,
        ..TrainConfig::default()
    };
    Trainer::new(model, store, tc)
}

fn main() -> scpr::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = TrainData::Lm((0..40).map(|_| std::iter::once(BOS).chain((0..10).map(|_| rng.random_range(3..30))).collect()).collect());
    let dir = std::env::temp_dir().join("scpr_checkpoint_resume");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.ckpt");

    let full = trainer(0, 20)?.run(&data, &mut std::io::sink(), None)?;
    trainer(0, 10)?.run(&data, &mut std::io::sink(), Some(&path))?;
    let mut resumed = trainer(123, 20)?;
    resumed.state = load_checkpoint(&path, &mut resumed.store)?;
    let rest = resumed.run(&data, &mut std::io::sink(), None)?;
    for (a, b) in full[10..].iter().zip(&rest) {
        println!("step {:>2}  uninterrupted {:.6}  resumed {:.6}", a.step, a.loss, b.loss);
    }
    Ok(())
}
