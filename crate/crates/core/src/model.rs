//! A transformer paired with one output head.

use rand::Rng;

use crate::autodiff::Graph;
use crate::data::EncodedRecord;
use crate::error::{Error, Result};
use crate::heads::{EncoderInput, HeadConfig, HeadInput, HeadOutput, OutputHead, Target};
use crate::params::ParamStore;
use crate::tensor::Real;
use crate::transformer::{ModelConfig, Transformer, BOS, PAD};

pub const SPECIAL_IDS: [usize; 2] = [BOS, PAD];

/// Inputs for one forward pass. `decoder` rows are model inputs; `encoder`
/// is set only for encoder-decoder models.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    pub decoder: Vec<Vec<usize>>,
    pub encoder: Option<Vec<Vec<usize>>>,
}

impl Batch {
    pub fn decoder_only(decoder: Vec<Vec<usize>>) -> Self {
        Batch { decoder, encoder: None }
    }
}

/// Splits BOS-prefixed sequences into model inputs and next-token targets.
pub fn lm_batch(seqs: &[Vec<usize>]) -> Result<(Batch, Vec<Target>)> {
    let mut inputs = Vec::with_capacity(seqs.len());
    let mut targets = Vec::new();
    for s in seqs {
        if s.len() < 2 {
            return Err(Error::EmptyBatch("sequence has no next-token target".into()));
        }
        inputs.push(s[..s.len() - 1].to_vec());
        targets.extend(s[1..].iter().map(|&x| if x == PAD { Target::Ignore } else { Target::Id(x) }));
    }
    Ok((Batch::decoder_only(inputs), targets))
}

/// One input row per record; only the last position carries a target, the
/// record's full distribution.
pub fn record_batch(records: &[&EncodedRecord]) -> (Batch, Vec<Target>) {
    let mut inputs = Vec::with_capacity(records.len());
    let mut targets = Vec::new();
    for r in records {
        inputs.push(r.context.clone());
        targets.extend(std::iter::repeat_n(Target::Ignore, r.context.len() - 1));
        targets.push(Target::Dist(r.target.clone()));
    }
    (Batch::decoder_only(inputs), targets)
}

#[derive(Clone, Debug)]
pub struct Model {
    pub transformer: Transformer,
    pub head: OutputHead,
}

impl Model {
    /// Registers transformer then head parameters, in that order.
    pub fn new<T: Real>(model: ModelConfig, head: HeadConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        if head.d_model != model.d_model {
            return Err(Error::Config(format!(
                "head d_model {} differs from model d_model {}",
                head.d_model, model.d_model
            )));
        }
        let seq2seq = model.seq2seq;
        let transformer = Transformer::new(model, store, rng)?;
        let head = OutputHead::new(head, transformer.output_embedding(), seq2seq, store, rng)?;
        Ok(Model { transformer, head })
    }

    pub fn vocab_size(&self) -> usize {
        self.transformer.cfg.vocab_size
    }

    /// Head output with one row per decoder input position, stacked in batch
    /// order.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, batch: &Batch) -> Result<HeadOutput> {
        let (enc, dec) = match &batch.encoder {
            Some(e) => {
                let (enc, dec) = self.transformer.forward_encoder_decoder(g, store, e, &batch.decoder)?;
                (Some(enc), dec)
            }
            None => (None, self.transformer.forward_decoder(g, store, &batch.decoder)?),
        };
        let block = if self.head.cfg.use_mi {
            let (r, c) = self.head.cfg.mi_block;
            Some(dec.block(g, r, c)?.states)
        } else {
            None
        };
        let input = HeadInput {
            hidden: dec.last(),
            block,
            layout: &dec.layout,
            tokens: &batch.decoder,
            encoder: match (&enc, &batch.encoder) {
                (Some(e), Some(tokens)) => Some(EncoderInput {
                    states: e.states,
                    layout: &e.layout,
                    tokens,
                }),
                _ => None,
            },
            special: &SPECIAL_IDS,
        };
        self.head.forward(g, store, &input)
    }

    /// Next-token distribution after each prompt, without recording gradients.
    pub fn next_distributions<T: Real>(&self, store: &ParamStore<T>, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, store, batch)?;
        let p = out.probs(&mut g)?;
        let probs = g.value(p);
        let mut row = 0;
        let mut out = Vec::with_capacity(batch.decoder.len());
        for s in &batch.decoder {
            row += s.len();
            out.push(probs.row(row - 1).iter().map(|x| x.as_f64()).collect());
        }
        Ok(out)
    }

    /// Row-wise log-probabilities for every position, without gradients.
    pub fn log_probs<T: Real>(&self, store: &ParamStore<T>, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, store, batch)?;
        let lp = out.log_probs(&mut g)?;
        let t = g.value(lp);
        Ok((0..t.rows()).map(|r| t.row(r).iter().map(|x| x.as_f64()).collect()).collect())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::heads::{head_nll, HeadKind};

    fn cfg(seq2seq: bool) -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 12,
            seq2seq,
            tie_embeddings: true,
        }
    }

    #[test]
    fn every_decoder_head_runs_end_to_end() {
        for kind in HeadKind::ALL {
            if kind == HeadKind::Cepr {
                continue;
            }
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let head = HeadConfig::new(kind, 8).with_k(2, 4).with_mi(3, 3);
            let m = Model::new(cfg(false), head, &mut store, &mut rng).unwrap();
            let (batch, targets) = lm_batch(&[vec![BOS, 3, 4, 3, 5], vec![BOS, 7, 7]]).unwrap();
            let mut g = Graph::new();
            let out = m.forward(&mut g, &store, &batch).unwrap();
            let loss = head_nll(&mut g, out, &targets).unwrap();
            assert!(g.value(loss).data()[0].is_finite(), "{kind}");
            let dists = m.next_distributions(&store, &batch).unwrap();
            for d in dists {
                assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{kind}");
            }
        }
    }

    #[test]
    fn encoder_decoder_heads_run() {
        for kind in [HeadKind::Cepr, HeadKind::CopyNet, HeadKind::PointerGen, HeadKind::PointerSentinel] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let m = Model::new(cfg(true), HeadConfig::new(kind, 8).with_k(3, 3).with_mi(1, 3), &mut store, &mut rng).unwrap();
            let batch = Batch {
                decoder: vec![vec![BOS, 4], vec![BOS]],
                encoder: Some(vec![vec![5, 6, 4], vec![9]]),
            };
            for d in m.next_distributions(&store, &batch).unwrap() {
                assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{kind}");
            }
        }
    }

    #[test]
    fn record_batch_targets_last_position() {
        let r = EncodedRecord {
            context: vec![BOS, 5, 6],
            target: vec![(5, 0.5), (6, 0.5)],
            forbidden: vec![],
            split: "diagonal".into(),
        };
        let (b, t) = record_batch(&[&r]);
        assert_eq!(b.decoder, vec![vec![BOS, 5, 6]]);
        assert_eq!(t[..2], [Target::Ignore, Target::Ignore]);
        assert_eq!(t[2], Target::Dist(vec![(5, 0.5), (6, 0.5)]));
    }

    #[test]
    fn mismatched_dims_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = Model::new(cfg(false), HeadConfig::new(HeadKind::Softmax, 4), &mut store, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
