//! Minimal pre-layer-norm transformer: decoder-only, or encoder-decoder with
//! cross-attention. Forward passes return every layer's hidden states so a
//! head can slice a multi-layer, multi-position block.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{AttnLayout, AttnSegment, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const BOS: usize = 0;
pub const UNK: usize = 1;
pub const PAD: usize = 2;

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seq2seq: bool,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 200,
            seq2seq: false,
            tie_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= PAD {
            return Err(Error::Config(format!("vocab_size {} leaves no room past reserved ids", self.vocab_size)));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be at least 1".into()));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, std: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(Linear {
            w: store.insert_normal(format!("{name}.weight"), &[din, dout], std, rng)?,
            b: store.insert(format!("{name}.bias"), Tensor::zeros(&[dout]))?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Norm {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full(&[d], T::one()))?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(store, self.gamma), g.param(store, self.beta));
        g.layer_norm(x, gm, bt, T::lit(LN_EPS))
    }
}

#[derive(Clone, Debug)]
struct Attention {
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_model;
        let resid_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
        Ok(Attention {
            norm: Norm::new(store, &format!("{name}.ln"), d)?,
            q: Linear::new(store, &format!("{name}.q"), d, d, INIT_STD, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, INIT_STD, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, INIT_STD, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, resid_std, rng)?,
        })
    }

    /// Residual update `x + attn(ln(x), memory)`; self-attention when `memory` is `None`.
    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        memory: Option<Var>,
        layout: &Arc<AttnLayout>,
    ) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let kv_src = memory.unwrap_or(h);
        let q = self.q.forward(g, store, h)?;
        let k = self.k.forward(g, store, kv_src)?;
        let v = self.v.forward(g, store, kv_src)?;
        let a = g.attention(q, k, v, layout.clone())?;
        let o = self.o.forward(g, store, a)?;
        g.add(x, o)
    }
}

#[derive(Clone, Debug)]
struct Block {
    attn: Attention,
    cross: Option<Attention>,
    mlp_norm: Norm,
    fc: Linear,
    proj: Linear,
}

impl Block {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, cross: bool, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_model;
        let resid_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
        Ok(Block {
            attn: Attention::new(store, &format!("{name}.attn"), cfg, rng)?,
            cross: if cross {
                Some(Attention::new(store, &format!("{name}.cross"), cfg, rng)?)
            } else {
                None
            },
            mlp_norm: Norm::new(store, &format!("{name}.mlp.ln"), d)?,
            fc: Linear::new(store, &format!("{name}.mlp.fc"), d, 4 * d, INIT_STD, rng)?,
            proj: Linear::new(store, &format!("{name}.mlp.proj"), 4 * d, d, resid_std, rng)?,
        })
    }

    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        self_layout: &Arc<AttnLayout>,
        cross: Option<(Var, &Arc<AttnLayout>)>,
    ) -> Result<Var> {
        let mut x = self.attn.forward(g, store, x, None, self_layout)?;
        if let (Some(c), Some((mem, layout))) = (&self.cross, cross) {
            x = c.forward(g, store, x, Some(mem), layout)?;
        }
        let h = self.mlp_norm.forward(g, store, x)?;
        let h = self.fc.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.proj.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// Row offsets of variable-length sequences stacked into one matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
}

impl SeqLayout {
    pub fn from_lens(lens: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in lens {
            offsets.push(acc);
            acc += l;
        }
        SeqLayout {
            offsets,
            lens: lens.to_vec(),
        }
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn row(&self, seq: usize, pos: usize) -> usize {
        self.offsets[seq] + pos
    }

    /// `(sequence, position)` for every stacked row, in row order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.lens.iter().enumerate().flat_map(|(s, &l)| (0..l).map(move |t| (s, t)))
    }

    fn self_attention(&self, n_heads: usize, causal: bool) -> AttnLayout {
        AttnLayout {
            n_heads,
            causal,
            segments: self
                .offsets
                .iter()
                .zip(&self.lens)
                .map(|(&o, &l)| AttnSegment {
                    q_start: o,
                    q_len: l,
                    k_start: o,
                    k_len: l,
                })
                .collect(),
        }
    }
}

/// Hidden states of one forward pass.
///
/// `layers[0]` is the embedding output, `layers[m]` the residual stream after
/// block `m`, and the last entry the final-norm output `h^M` that feeds the
/// head.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub layers: Vec<Var>,
    pub layout: SeqLayout,
}

impl DecoderOutput {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least one layer")
    }

    /// Gathers the `rows × cols` block of `h^{M-m}_{t-i}` (m < rows, i < cols)
    /// for every stacked position; positions before the sequence start are
    /// zero rows.
    pub fn block<T: Real>(&self, g: &mut Graph<T>, rows: usize, cols: usize) -> Result<HiddenStateBlock> {
        if rows == 0 || cols == 0 || rows > self.layers.len() {
            return Err(Error::Config(format!(
                "hidden-state block {rows}x{cols} needs 1..={} layer rows",
                self.layers.len()
            )));
        }
        let mut parts = Vec::with_capacity(rows * cols);
        for m in 0..rows {
            let layer = self.layers[self.layers.len() - 1 - m];
            for i in 0..cols {
                let ids: Vec<Option<usize>> = self
                    .layout
                    .positions()
                    .map(|(s, t)| t.checked_sub(i).map(|p| self.layout.row(s, p)))
                    .collect();
                parts.push(g.gather_rows_or_zero(layer, &ids)?);
            }
        }
        let states = g.concat_cols(&parts)?;
        Ok(HiddenStateBlock {
            states,
            block_shape: (rows, cols),
        })
    }
}

/// Concatenated `rows × cols` block of hidden states, one row per position.
#[derive(Clone, Copy, Debug)]
pub struct HiddenStateBlock {
    pub states: Var,
    pub block_shape: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub states: Var,
    pub layout: SeqLayout,
}

#[derive(Clone, Debug)]
struct Encoder {
    blocks: Vec<Block>,
    norm: Norm,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub cfg: ModelConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    out_emb: ParamId,
    blocks: Vec<Block>,
    norm: Norm,
    encoder: Option<Encoder>,
}

impl Transformer {
    pub fn new<T: Real>(cfg: ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let tok_emb = store.insert_normal("model.tok_emb", &[cfg.vocab_size, d], INIT_STD, rng)?;
        let pos_emb = store.insert_normal("model.pos_emb", &[cfg.max_seq_len, d], INIT_STD / 2.0, rng)?;
        let encoder = if cfg.seq2seq {
            let blocks = (0..cfg.n_layers)
                .map(|i| Block::new(store, &format!("model.enc.{i}"), &cfg, false, rng))
                .collect::<Result<Vec<_>>>()?;
            Some(Encoder {
                blocks,
                norm: Norm::new(store, "model.enc.ln_f", d)?,
            })
        } else {
            None
        };
        let blocks = (0..cfg.n_layers)
            .map(|i| Block::new(store, &format!("model.dec.{i}"), &cfg, cfg.seq2seq, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = Norm::new(store, "model.dec.ln_f", d)?;
        let out_emb = if cfg.tie_embeddings {
            tok_emb
        } else {
            store.insert_normal("model.out_emb", &[cfg.vocab_size, d], INIT_STD, rng)?
        };
        Ok(Transformer {
            cfg,
            tok_emb,
            pos_emb,
            out_emb,
            blocks,
            norm,
            encoder,
        })
    }

    /// The output word-embedding table `[V × d]` used by every head.
    pub fn output_embedding(&self) -> ParamId {
        self.out_emb
    }

    pub fn input_embedding(&self) -> ParamId {
        self.tok_emb
    }

    fn check_tokens(&self, seqs: &[Vec<usize>]) -> Result<SeqLayout> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::EmptyBatch("every sequence needs at least one token".into()));
        }
        for s in seqs {
            if s.len() > self.cfg.max_seq_len {
                return Err(Error::Length {
                    len: s.len(),
                    max: self.cfg.max_seq_len,
                });
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= self.cfg.vocab_size) {
                return Err(Error::Index {
                    op: "token id",
                    index: bad,
                    extent: self.cfg.vocab_size,
                });
            }
        }
        Ok(SeqLayout::from_lens(&seqs.iter().map(Vec::len).collect::<Vec<_>>()))
    }

    fn embed<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, seqs: &[Vec<usize>], layout: &SeqLayout) -> Result<Var> {
        let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
        let pos: Vec<usize> = layout.positions().map(|(_, t)| t).collect();
        let (te, pe) = (g.param(store, self.tok_emb), g.param(store, self.pos_emb));
        let x = g.gather_rows(te, &ids)?;
        let p = g.gather_rows(pe, &pos)?;
        g.add(x, p)
    }

    fn run_decoder<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        seqs: &[Vec<usize>],
        memory: Option<&EncoderOutput>,
    ) -> Result<DecoderOutput> {
        let layout = self.check_tokens(seqs)?;
        let self_layout = Arc::new(layout.self_attention(self.cfg.n_heads, true));
        let cross_layout = memory.map(|m| {
            Arc::new(AttnLayout {
                n_heads: self.cfg.n_heads,
                causal: false,
                segments: (0..layout.lens.len())
                    .map(|s| AttnSegment {
                        q_start: layout.offsets[s],
                        q_len: layout.lens[s],
                        k_start: m.layout.offsets[s],
                        k_len: m.layout.lens[s],
                    })
                    .collect(),
            })
        });
        let mut x = self.embed(g, store, seqs, &layout)?;
        let mut layers = vec![x];
        for (i, block) in self.blocks.iter().enumerate() {
            let cross = memory.zip(cross_layout.as_ref()).map(|(m, l)| (m.states, l));
            x = block.forward(g, store, x, &self_layout, cross)?;
            if i + 1 < self.blocks.len() {
                layers.push(x);
            }
        }
        layers.push(self.norm.forward(g, store, x)?);
        Ok(DecoderOutput { layers, layout })
    }

    /// Causal decoder-only forward pass over a batch of token sequences.
    pub fn forward_decoder<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, seqs: &[Vec<usize>]) -> Result<DecoderOutput> {
        if self.cfg.seq2seq {
            return Err(Error::Mode("seq2seq model needs forward_encoder_decoder".into()));
        }
        self.run_decoder(g, store, seqs, None)
    }

    /// Bidirectional encoder pass. Its states never depend on decoder tokens.
    pub fn forward_encoder<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, seqs: &[Vec<usize>]) -> Result<EncoderOutput> {
        let enc = self
            .encoder
            .as_ref()
            .ok_or_else(|| Error::Config("model.seq2seq is not set; no encoder".into()))?;
        let layout = self.check_tokens(seqs)?;
        let attn = Arc::new(layout.self_attention(self.cfg.n_heads, false));
        let mut x = self.embed(g, store, seqs, &layout)?;
        for block in &enc.blocks {
            x = block.forward(g, store, x, &attn, None)?;
        }
        let states = enc.norm.forward(g, store, x)?;
        Ok(EncoderOutput { states, layout })
    }

    pub fn forward_encoder_decoder<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        enc_tokens: &[Vec<usize>],
        dec_tokens: &[Vec<usize>],
    ) -> Result<(EncoderOutput, DecoderOutput)> {
        if !self.cfg.seq2seq {
            return Err(Error::Config("model.seq2seq is not set".into()));
        }
        if enc_tokens.len() != dec_tokens.len() {
            return Err(Error::shape("forward_encoder_decoder", &[enc_tokens.len()], &[dec_tokens.len()]));
        }
        let enc = self.forward_encoder(g, store, enc_tokens)?;
        let dec = self.run_decoder(g, store, dec_tokens, Some(&enc))?;
        Ok((enc, dec))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tiny(seq2seq: bool) -> (Transformer, ParamStore<f64>) {
        let cfg = ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 10,
            seq2seq,
            tie_embeddings: true,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Transformer::new(cfg, &mut store, &mut rng).unwrap();
        (m, store)
    }

    #[test]
    fn one_layer_one_head_shape() {
        let cfg = ModelConfig {
            vocab_size: 5,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            max_seq_len: 4,
            seq2seq: false,
            tie_embeddings: true,
        };
        let mut store = ParamStore::<f32>::new();
        let m = Transformer::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let out = m.forward_decoder(&mut g, &store, &[vec![0, 3]]).unwrap();
        let h = g.value(out.last());
        assert_eq!(h.shape(), &[2, 4]);
        assert!(h.all_finite());
    }

    #[test]
    fn tied_embeddings_share_one_parameter() {
        let (m, store) = tiny(false);
        assert_eq!(m.output_embedding(), m.input_embedding());
        assert!(store.id("model.out_emb").is_none());
    }

    #[test]
    fn overlong_sequence_is_a_length_error() {
        let (m, store) = tiny(false);
        let mut g = Graph::new();
        let err = m.forward_decoder(&mut g, &store, &[vec![0; 11]]).unwrap_err();
        assert!(matches!(err, Error::Length { len: 11, max: 10 }));
    }

    #[test]
    fn future_tokens_do_not_change_earlier_states() {
        let (m, store) = tiny(false);
        let mut g = Graph::new();
        let a = m.forward_decoder(&mut g, &store, &[vec![0, 4, 5, 6, 7]]).unwrap();
        let b = m.forward_decoder(&mut g, &store, &[vec![0, 4, 5, 9, 3]]).unwrap();
        for (&la, &lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(g.value(la).data()[..3 * 8], g.value(lb).data()[..3 * 8]);
        }
    }

    #[test]
    fn block_zero_fills_before_sequence_start() {
        let (m, store) = tiny(false);
        let mut g = Graph::new();
        let out = m.forward_decoder(&mut g, &store, &[vec![0, 4, 5], vec![0, 7]]).unwrap();
        let block = out.block(&mut g, 3, 3).unwrap();
        let b = g.value(block.states);
        assert_eq!(b.shape(), &[5, 9 * 8]);
        // row 0 (seq 0, t=0): column groups i=1,2 of every layer are zero
        for m_ in 0..3 {
            for i in 1..3 {
                let start = (m_ * 3 + i) * 8;
                assert!(b.row(0)[start..start + 8].iter().all(|&v| v == 0.0));
            }
        }
        // row 4 (seq 1, t=1): i=1 reads seq 1 position 0, i=2 is zero
        let last = g.value(out.last());
        assert_eq!(&b.row(4)[8..16], last.row(3));
        assert!(b.row(4)[16..24].iter().all(|&v| v == 0.0));
        assert!(out.block(&mut g, 4, 1).is_err());
    }

    #[test]
    fn encoder_states_ignore_decoder_tokens() {
        let (m, store) = tiny(true);
        let mut g = Graph::new();
        let (ea, _) = m.forward_encoder_decoder(&mut g, &store, &[vec![3, 4, 5]], &[vec![0]]).unwrap();
        let (eb, db) = m.forward_encoder_decoder(&mut g, &store, &[vec![3, 4, 5]], &[vec![0, 7, 8]]).unwrap();
        assert_eq!(g.value(ea.states), g.value(eb.states));
        assert_eq!(g.value(db.last()).shape(), &[3, 8]);
    }

    #[test]
    fn mode_checks() {
        let (m, store) = tiny(false);
        let mut g = Graph::new();
        assert!(matches!(
            m.forward_encoder_decoder(&mut g, &store, &[vec![1]], &[vec![0]]),
            Err(Error::Config(_))
        ));
        let (m2, store2) = tiny(true);
        assert!(matches!(m2.forward_decoder(&mut g, &store2, &[vec![0]]), Err(Error::Mode(_))));
        let _ = store;
    }
}
