//! Verifies reverse-mode gradients of every head's NLL, through a small
//! transformer, against five-point central differences in f64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scpr::gradcheck::{grad_check, GradCheckOptions};
use scpr::heads::{head_nll, HeadConfig, HeadKind, Target};
use scpr::model::{Batch, Model};
use scpr::transformer::{ModelConfig, BOS};
use scpr::ParamStore;

fn main() -> scpr::Result<()> {
    let opts = GradCheckOptions {
        eps: 3e-5,
        five_point: true,
        ..GradCheckOptions::default()
    };
    for kind in HeadKind::ALL {
        let seq2seq = kind == HeadKind::Cepr;
        let cfg = ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 8,
            seq2seq,
            tie_embeddings: true,
        };
        let mut store = ParamStore::<f64>::new();
        let model = Model::new(cfg, HeadConfig::new(kind, 8).with_k(2, 4), &mut store, &mut ChaCha8Rng::seed_from_u64(1))?;
        let batch = Batch {
            decoder: vec![vec![BOS, 4, 5, 4]],
            encoder: seq2seq.then(|| vec![vec![6, 4, 7]]),
        };
        let targets = [4, 5, 4, 9].map(Target::Id);
        let r = grad_check(
            &mut store,
            |g, s| {
                let out = model.forward(g, s, &batch)?;
                head_nll(g, out, &targets)
            },
            opts,
        )?;
        println!("{:<18} coords={:<5} max_rel_err={:.2e} {}", kind.name(), r.coordinates, r.max_rel_err, if r.passed { "ok" } else { "FAIL" });
    }
    Ok(())
}
