//! Every logit-space head starts out identical to the plain softmax head:
//! builds each on the same transformer and prints the largest logit gap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scpr::heads::{HeadConfig, HeadKind, HeadOutput};
use scpr::model::{Batch, Model};
use scpr::transformer::{ModelConfig, BOS};
use scpr::{Graph, ParamStore, Tensor};

fn logits(h: HeadConfig, seq2seq: bool, batch: &Batch) -> scpr::Result<Tensor<f64>> {
    let cfg = ModelConfig {
        vocab_size: 120,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        max_seq_len: 32,
        seq2seq,
        tie_embeddings: true,
    };
    let mut store = ParamStore::new();
    let model = Model::new(cfg, h, &mut store, &mut ChaCha8Rng::seed_from_u64(7))?;
    let mut g = Graph::inference();
    match model.forward(&mut g, &store, batch)? {
        HeadOutput::Logits(v) => Ok(g.value(v).clone()),
        HeadOutput::Probs(_) => unreachable!("logit-space head"),
    }
}

fn main() -> scpr::Result<()> {
    let dec = vec![vec![BOS, 10, 11, 10, 50, 51], vec![BOS, 70, 70]];
    let enc = vec![vec![10, 12, 13], vec![71, 72]];
    for (h, seq2seq) in [
        (HeadConfig::new(HeadKind::C, 32).with_mi(3, 3), false),
        (HeadConfig::new(HeadKind::R, 32), false),
        (HeadConfig::new(HeadKind::P, 32), false),
        (HeadConfig::new(HeadKind::Cpr, 32).with_mi(3, 3), false),
        (HeadConfig::new(HeadKind::Cepr, 32).with_mi(1, 3), true),
    ] {
        let batch = Batch {
            decoder: dec.clone(),
            encoder: seq2seq.then(|| enc.clone()),
        };
        let base = logits(HeadConfig::new(HeadKind::Softmax, 32), seq2seq, &batch)?;
        let head = logits(h.clone(), seq2seq, &batch)?;
        println!("{:<24} max |logit - softmax logit| = {:.2e}", h.label(), head.max_abs_diff(&base)?);
    }
    Ok(())
}
