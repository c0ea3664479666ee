//! Next-token output heads.
//!
//! Logit-space heads (softmax, C, R, P, CPR, CEPR) overwrite entries of the
//! standard `f_V · w_x` logit matrix per a dynamic vocabulary partition.
//! Probability-space heads (MoS and the three pointer baselines) mix
//! normalized distributions. Both produce a [`HeadOutput`] consumed by
//! [`head_nll`].
//!
//! [`OutputHead::forward`] processes every stacked position of a batch in one
//! graph; the [`dense`] module recomputes a single position with plain loops.

mod batched;
pub mod dense;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::transformer::SeqLayout;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Scale of the pointer/local-embedding maps at initialization.
pub const LOCAL_INIT_SCALE: f64 = 1e-10;
/// Perturbation added to extra MoS components so they do not stay identical.
const MOS_INIT_NOISE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Softmax,
    Mos,
    C,
    R,
    P,
    Cpr,
    Cepr,
    CopyNet,
    PointerGen,
    PointerSentinel,
}

impl HeadKind {
    pub const ALL: [HeadKind; 10] = [
        HeadKind::Softmax,
        HeadKind::Mos,
        HeadKind::C,
        HeadKind::R,
        HeadKind::P,
        HeadKind::Cpr,
        HeadKind::Cepr,
        HeadKind::CopyNet,
        HeadKind::PointerGen,
        HeadKind::PointerSentinel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Softmax => "softmax",
            HeadKind::Mos => "mos",
            HeadKind::C => "c",
            HeadKind::R => "r",
            HeadKind::P => "p",
            HeadKind::Cpr => "cpr",
            HeadKind::Cepr => "cepr",
            HeadKind::CopyNet => "copynet",
            HeadKind::PointerGen => "pointer_gen",
            HeadKind::PointerSentinel => "pointer_sentinel",
        }
    }

    /// Heads whose output is a probability matrix rather than logits.
    pub fn mixes_probabilities(self) -> bool {
        matches!(
            self,
            HeadKind::Mos | HeadKind::CopyNet | HeadKind::PointerGen | HeadKind::PointerSentinel
        )
    }

    fn partitioned(self) -> bool {
        matches!(self, HeadKind::C | HeadKind::R | HeadKind::Cpr | HeadKind::Cepr)
    }

    fn uses_context_branch(self) -> bool {
        matches!(self, HeadKind::C | HeadKind::Cpr | HeadKind::Cepr)
    }

    fn uses_local_decoder(self) -> bool {
        matches!(self, HeadKind::P | HeadKind::Cpr | HeadKind::Cepr)
    }

    fn uses_pointer(self) -> bool {
        matches!(self, HeadKind::CopyNet | HeadKind::PointerGen | HeadKind::PointerSentinel)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        HeadKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown head kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub k1: usize,
    pub k2: usize,
    pub use_mi: bool,
    /// `(layers, positions)` of the hidden-state block fed to the Mi projection.
    pub mi_block: (usize, usize),
    pub mos_components: usize,
    pub d_model: usize,
    /// Initial CopyNet pointer bias `b`.
    pub copy_bias: f64,
    /// Initial pointer-generator gate bias `b_ptr`.
    pub ptr_bias: f64,
}

impl HeadConfig {
    pub fn new(kind: HeadKind, d_model: usize) -> Self {
        HeadConfig {
            kind,
            k1: 20,
            k2: 100,
            use_mi: false,
            mi_block: (3, 3),
            mos_components: 3,
            d_model,
            copy_bias: -20.0,
            ptr_bias: 0.0,
        }
    }

    pub fn with_mi(mut self, rows: usize, cols: usize) -> Self {
        self.use_mi = true;
        self.mi_block = (rows, cols);
        self
    }

    pub fn with_k(mut self, k1: usize, k2: usize) -> Self {
        self.k1 = k1;
        self.k2 = k2;
        self
    }

    /// Reranker sizes actually in effect for this kind.
    pub fn effective_k(&self) -> (usize, usize) {
        match self.kind {
            HeadKind::R | HeadKind::Cpr => (self.k1, self.k2),
            HeadKind::Cepr => (self.k1, 0),
            _ => (0, 0),
        }
    }

    pub fn q_dim(&self) -> usize {
        if self.use_mi {
            2 * self.d_model
        } else {
            self.d_model
        }
    }

    pub fn validate(&self, seq2seq: bool) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::Config("head d_model must be positive".into()));
        }
        if matches!(self.kind, HeadKind::R | HeadKind::Cpr) && self.k1 > self.k2 {
            return Err(Error::Config(format!("head.k1 = {} exceeds head.k2 = {}", self.k1, self.k2)));
        }
        if self.kind == HeadKind::Cepr && !seq2seq {
            return Err(Error::Config("cepr head requires an encoder-decoder model".into()));
        }
        if self.kind == HeadKind::Mos && self.mos_components == 0 {
            return Err(Error::Config("head.mos_components must be at least 1".into()));
        }
        if self.use_mi && (self.mi_block.0 == 0 || self.mi_block.1 == 0) {
            return Err(Error::Config("head.mi_block dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Table-style label such as `softmax+cpr:20,100+mi`.
    pub fn label(&self) -> String {
        let base = match self.kind {
            HeadKind::R | HeadKind::Cpr => format!("softmax+{}:{},{}", self.kind, self.k1, self.k2),
            HeadKind::Cepr => format!("softmax+cepr:{}", self.k1),
            HeadKind::C | HeadKind::P => format!("softmax+{}", self.kind),
            k => k.to_string(),
        };
        if self.use_mi {
            format!("{base}+mi")
        } else {
            base
        }
    }
}

/// Affine map `y = x W + b` with `W: [din × dout]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn identity<T: Real>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, scale: f64) -> Result<Self> {
        Ok(Linear {
            w: store.insert(format!("{name}.weight"), Tensor::rect_identity(din, dout, T::lit(scale)))?,
            b: store.insert(format!("{name}.bias"), Tensor::zeros(&[dout]))?,
        })
    }

    pub(crate) fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// Plain-loop application to one vector.
    pub fn apply<T: Real>(&self, store: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let w = &store.get(self.w).tensor;
        let mut y = store.get(self.b).tensor.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for (yo, &wv) in y.iter_mut().zip(w.row(i)) {
                *yo += xi * wv;
            }
        }
        y
    }
}

/// Every learned map of a head. Maps not needed by the configured kind are
/// `None`.
#[derive(Clone, Debug, Default)]
pub struct HeadProjections {
    pub v: Option<Linear>,
    pub c: Option<Linear>,
    pub e: Option<Linear>,
    pub pd: Option<Linear>,
    pub pe: Option<Linear>,
    pub r1: Option<Linear>,
    pub r2: Option<Linear>,
    pub ld: Option<Linear>,
    pub le: Option<Linear>,
    pub mi: Option<Linear>,
    /// Extra MoS components; component 0 is `v`.
    pub mos: Vec<Linear>,
    pub mos_gate: Option<Linear>,
    pub gen_query: Option<ParamId>,
    pub ptr_v: Option<ParamId>,
    pub ptr_b: Option<ParamId>,
    pub ptr_bias: Option<ParamId>,
    pub sentinel_query: Option<ParamId>,
    pub pointer_bias: Option<ParamId>,
}

fn need(p: Option<Linear>, what: &str) -> Result<Linear> {
    p.ok_or_else(|| Error::Config(format!("head has no {what} projection")))
}

fn need_id(p: Option<ParamId>, what: &str) -> Result<ParamId> {
    p.ok_or_else(|| Error::Config(format!("head has no {what} parameter")))
}

impl HeadProjections {
    fn build<T: Real>(cfg: &HeadConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        let (d, qd) = (cfg.d_model, cfg.q_dim());
        let kind = cfg.kind;
        let (k1, k2) = cfg.effective_k();
        let full = |store: &mut ParamStore<T>, name: &str, din: usize| Linear::identity(store, name, din, d, 1.0);
        let tiny = |store: &mut ParamStore<T>, name: &str, din: usize| Linear::identity(store, name, din, d, LOCAL_INIT_SCALE);
        let mut p = HeadProjections {
            v: Some(full(store, "head.L_V", qd)?),
            ..Default::default()
        };
        if cfg.use_mi {
            let (rows, cols) = cfg.mi_block;
            p.mi = Some(full(store, "head.L_h", rows * cols * d)?);
        }
        if kind.uses_context_branch() {
            p.c = Some(full(store, "head.L_C", qd)?);
        }
        if kind.uses_local_decoder() {
            p.pd = Some(tiny(store, "head.L_PD", qd)?);
            p.ld = Some(tiny(store, "head.L_LD", qd)?);
        }
        if kind.partitioned() && k1 > 0 {
            p.r1 = Some(full(store, "head.L_R1", qd)?);
        }
        if kind.partitioned() && k2 > 0 {
            p.r2 = Some(full(store, "head.L_R2", qd)?);
        }
        if kind == HeadKind::Cepr {
            p.e = Some(full(store, "head.L_E", qd)?);
        }
        if kind == HeadKind::Cepr || kind.uses_pointer() {
            p.pe = Some(tiny(store, "head.L_PE", qd)?);
            p.le = Some(tiny(store, "head.L_LE", d)?);
        }
        if kind == HeadKind::Mos {
            let normal = Normal::new(0.0, MOS_INIT_NOISE).map_err(|e| Error::Config(e.to_string()))?;
            for k in 1..cfg.mos_components {
                let mut w = Tensor::rect_identity(qd, d, T::one());
                for x in w.data_mut() {
                    *x += T::lit(normal.sample(rng));
                }
                p.mos.push(Linear {
                    w: store.insert(format!("head.mos.{k}.weight"), w)?,
                    b: store.insert(format!("head.mos.{k}.bias"), Tensor::zeros(&[d]))?,
                });
            }
            p.mos_gate = Some(Linear {
                w: store.insert("head.mos.gate.weight", Tensor::zeros(&[qd, cfg.mos_components]))?,
                b: store.insert("head.mos.gate.bias", Tensor::zeros(&[cfg.mos_components]))?,
            });
        }
        match kind {
            HeadKind::CopyNet => {
                p.pointer_bias = Some(store.insert("head.copy.b", Tensor::new(vec![1], vec![T::lit(cfg.copy_bias)])?)?);
            }
            HeadKind::PointerGen => {
                p.gen_query = Some(store.insert_normal("head.pg.q", &[d, 1], 0.02, rng)?);
                p.ptr_v = Some(store.insert_normal("head.pg.v", &[d, 1], 0.02, rng)?);
                p.ptr_b = Some(store.insert("head.pg.b", Tensor::zeros(&[d]))?);
                p.ptr_bias = Some(store.insert("head.pg.b_ptr", Tensor::new(vec![1], vec![T::lit(cfg.ptr_bias)])?)?);
            }
            HeadKind::PointerSentinel => {
                p.sentinel_query = Some(store.insert_normal("head.ps.q", &[d, 1], 0.02, rng)?);
                p.pointer_bias = Some(store.insert("head.ps.b", Tensor::zeros(&[1]))?);
            }
            _ => {}
        }
        Ok(p)
    }
}

/// Pointer source for encoder-decoder models.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    /// Final encoder states, one row per encoder token.
    pub states: Var,
    pub layout: &'a SeqLayout,
    pub tokens: &'a [Vec<usize>],
}

/// Everything a head reads for one batch of stacked positions.
#[derive(Clone, Copy, Debug)]
pub struct HeadInput<'a> {
    /// Final decoder states `h^M`, one row per position.
    pub hidden: Var,
    /// Flattened hidden-state block for Mi, one row per position.
    pub block: Option<Var>,
    pub layout: &'a SeqLayout,
    /// Decoder input tokens; row `(s, t)` predicts the token after `tokens[s][t]`.
    pub tokens: &'a [Vec<usize>],
    pub encoder: Option<EncoderInput<'a>>,
    /// Ids that never join a context or pointer set (BOS and PAD).
    pub special: &'a [usize],
}

#[derive(Clone, Copy, Debug)]
pub enum HeadOutput {
    Logits(Var),
    Probs(Var),
}

impl HeadOutput {
    pub fn var(self) -> Var {
        match self {
            HeadOutput::Logits(v) | HeadOutput::Probs(v) => v,
        }
    }

    /// Row-wise log-probabilities `[N × V]`.
    pub fn log_probs<T: Real>(self, g: &mut Graph<T>) -> Result<Var> {
        match self {
            HeadOutput::Logits(v) => g.log_softmax(v),
            HeadOutput::Probs(v) => g.log_floor(v, T::lit(PROB_FLOOR)),
        }
    }

    /// Row-wise probabilities `[N × V]`.
    pub fn probs<T: Real>(self, g: &mut Graph<T>) -> Result<Var> {
        match self {
            HeadOutput::Logits(v) => g.softmax(v),
            HeadOutput::Probs(v) => Ok(v),
        }
    }
}

/// Training target for one position.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Id(usize),
    /// Soft target distribution as `(id, probability)` pairs.
    Dist(Vec<(usize, f64)>),
    /// Padding position; excluded from the loss.
    Ignore,
}

/// Mean negative log-likelihood over non-ignored positions; soft targets give
/// the cross-entropy against their distribution.
pub fn head_nll<T: Real>(g: &mut Graph<T>, out: HeadOutput, targets: &[Target]) -> Result<Var> {
    let lp = out.log_probs(g)?;
    let v = g.value(lp).cols();
    if targets.len() != g.value(lp).rows() {
        return Err(Error::shape("head_nll", g.shape(lp), &[targets.len()]));
    }
    let active = targets.iter().filter(|t| !matches!(t, Target::Ignore)).count();
    if active == 0 {
        return Err(Error::EmptyBatch("every target is padding".into()));
    }
    let inv = -1.0 / active as f64;
    let mut entries = Vec::new();
    for (r, t) in targets.iter().enumerate() {
        match t {
            Target::Id(x) => {
                check_id(*x, v)?;
                entries.push((0, r * v + x, T::lit(inv)));
            }
            Target::Dist(d) => {
                for &(x, w) in d {
                    check_id(x, v)?;
                    if w > 0.0 {
                        entries.push((0, r * v + x, T::lit(inv * w)));
                    }
                }
            }
            Target::Ignore => {}
        }
    }
    g.scatter_add(None, &[1], lp, Arc::new(entries))
}

fn check_id(x: usize, v: usize) -> Result<()> {
    if x >= v {
        return Err(Error::Index {
            op: "head_nll target",
            index: x,
            extent: v,
        });
    }
    Ok(())
}

/// A configured head bound to an output word-embedding table.
#[derive(Clone, Debug)]
pub struct OutputHead {
    pub cfg: HeadConfig,
    pub proj: HeadProjections,
    pub embedding: ParamId,
}

impl OutputHead {
    /// Registers the head's parameters in `store`, initialized so every
    /// logit-space kind starts out equal to the plain softmax head.
    pub fn new<T: Real>(
        cfg: HeadConfig,
        embedding: ParamId,
        seq2seq: bool,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate(seq2seq)?;
        let e = &store.get(embedding).tensor;
        if e.shape().len() != 2 || e.cols() != cfg.d_model {
            return Err(Error::shape("output embedding", e.shape(), &[0, cfg.d_model]));
        }
        let proj = HeadProjections::build(&cfg, store, rng)?;
        Ok(OutputHead { cfg, proj, embedding })
    }

    pub fn vocab_size<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.embedding).tensor.rows()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: &HeadInput<'_>) -> Result<HeadOutput> {
        batched::forward(self, g, store, input)
    }
}
