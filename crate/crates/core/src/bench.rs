//! Head-only cost: closed-form multiply-accumulate counts and median wall
//! time over repeated forward passes on frozen random parameters.

use std::fmt;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadInput, HeadKind, OutputHead};
use crate::model::SPECIAL_IDS;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::transformer::SeqLayout;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub vocab_sizes: Vec<usize>,
    pub d_models: Vec<usize>,
    /// Head templates; `d_model` is overwritten per run.
    pub heads: Vec<HeadConfig>,
    /// Distinct context ids per sequence; every sequence has this length.
    pub context_len: usize,
    pub n_seqs: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            vocab_sizes: vec![10_000],
            d_models: vec![128],
            heads: vec![
                HeadConfig::new(HeadKind::Softmax, 128),
                HeadConfig::new(HeadKind::Mos, 128),
                HeadConfig::new(HeadKind::Cpr, 128),
            ],
            context_len: 200,
            n_seqs: 1,
            reps: 30,
            warmup: 3,
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 10 || self.warmup < 3 {
            return Err(Error::Config("bench needs at least 10 repetitions after 3 warmup runs".into()));
        }
        if self.vocab_sizes.is_empty() || self.d_models.is_empty() || self.heads.is_empty() || self.n_seqs == 0 || self.context_len == 0 {
            return Err(Error::Config("bench grid is empty".into()));
        }
        for &v in &self.vocab_sizes {
            if v < self.context_len + SPECIAL_IDS.len() + 1 {
                return Err(Error::Config(format!("vocab size {v} is too small for {} context ids", self.context_len)));
            }
        }
        Ok(())
    }
}

/// Closed-form multiply-accumulates per position for the vocabulary-sized
/// products of a head, given `ctx` context ids and `enc` encoder ids.
///
/// Every head pays `V·d` for the default logits. MoS pays it once per
/// component. Partitioned heads add one `d`-dot per context, encoder and
/// reranker id; a nonzero `k1` with a second reranker also pays `V·d` for
/// the full `f_R2` logits that rank `W(k1)`.
pub fn head_macs(cfg: &HeadConfig, vocab: usize, ctx: usize, enc: usize) -> u64 {
    let (v, d) = (vocab as u64, cfg.d_model as u64);
    let (ctx, enc) = (ctx.min(vocab) as u64, enc.min(vocab) as u64);
    let (k1, k2) = cfg.effective_k();
    let (k1, k2) = (k1.min(vocab) as u64, k2.min(vocab) as u64);
    let base = v * d;
    match cfg.kind {
        HeadKind::Softmax => base,
        HeadKind::Mos => cfg.mos_components as u64 * base,
        HeadKind::C | HeadKind::P => base + ctx * d,
        HeadKind::R | HeadKind::Cpr => {
            let r2 = if k1 > 0 { base } else { 0 };
            let c = if cfg.kind == HeadKind::Cpr { ctx } else { 0 };
            base + r2 + (c + k1 + k2) * d
        }
        HeadKind::Cepr => base + (ctx + enc + k1) * d,
        HeadKind::CopyNet | HeadKind::PointerGen | HeadKind::PointerSentinel => base + (ctx + enc) * d,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub head: String,
    pub vocab: usize,
    pub d_model: usize,
    pub median_us: f64,
    pub iqr_us: f64,
    /// Closed-form multiply-accumulates for the whole batch.
    pub flops: u64,
}

impl fmt::Display for BenchResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "bench head={} V={} d={} median_us={:.1} flops={}",
            self.head, self.vocab, self.d_model, self.median_us, self.flops
        )
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

struct Fixture {
    store: ParamStore<f32>,
    head: OutputHead,
    hidden: Tensor<f32>,
    block: Option<Tensor<f32>>,
    tokens: Vec<Vec<usize>>,
    layout: SeqLayout,
}

fn fixture(spec: &BenchSpec, cfg: &HeadConfig, vocab: usize) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = cfg.d_model;
    let mut store = ParamStore::<f32>::new();
    let emb = store.insert_normal("bench.emb", &[vocab, d], 0.02, &mut rng)?;
    let head = OutputHead::new(cfg.clone(), emb, false, &mut store, &mut rng)?;
    let n = spec.n_seqs * spec.context_len;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let hidden = Tensor::from_fn(&[n, d], |_| normal.sample(&mut rng) as f32);
    let block = cfg.use_mi.then(|| {
        let w = cfg.mi_block.0 * cfg.mi_block.1 * d;
        Tensor::from_fn(&[n, w], |_| normal.sample(&mut rng) as f32)
    });
    let free = vocab - SPECIAL_IDS.len();
    let tokens: Vec<Vec<usize>> = (0..spec.n_seqs)
        .map(|_| index::sample(&mut rng, free, spec.context_len).into_iter().map(|i| i + SPECIAL_IDS.len()).collect())
        .collect();
    let layout = SeqLayout::from_lens(&vec![spec.context_len; spec.n_seqs]);
    Ok(Fixture {
        store,
        head,
        hidden,
        block,
        tokens,
        layout,
    })
}

fn run_once(f: &Fixture) -> Result<()> {
    let mut g = Graph::<f32>::inference();
    let hidden = g.constant(f.hidden.clone());
    let block = f.block.clone().map(|b| g.constant(b));
    let input = HeadInput {
        hidden,
        block,
        layout: &f.layout,
        tokens: &f.tokens,
        encoder: None,
        special: &SPECIAL_IDS,
    };
    let out = f.head.forward(&mut g, &f.store, &input)?;
    out.probs(&mut g)?;
    Ok(())
}

/// Times one head at one size.
pub fn bench_one(spec: &BenchSpec, cfg: &HeadConfig, vocab: usize) -> Result<BenchResult> {
    let f = fixture(spec, cfg, vocab)?;
    for _ in 0..spec.warmup {
        run_once(&f)?;
    }
    let mut times = Vec::with_capacity(spec.reps);
    for _ in 0..spec.reps {
        let t = Instant::now();
        run_once(&f)?;
        times.push(t.elapsed().as_secs_f64() * 1e6);
    }
    times.sort_by(f64::total_cmp);
    let rows = (spec.n_seqs * spec.context_len) as u64;
    Ok(BenchResult {
        head: cfg.label(),
        vocab,
        d_model: cfg.d_model,
        median_us: quantile(&times, 0.5),
        iqr_us: quantile(&times, 0.75) - quantile(&times, 0.25),
        flops: rows * head_macs(cfg, vocab, spec.context_len, 0),
    })
}

/// Runs the full grid, heads innermost.
pub fn bench_heads(spec: &BenchSpec) -> Result<Vec<BenchResult>> {
    spec.validate()?;
    let mut out = Vec::new();
    for &v in &spec.vocab_sizes {
        for &d in &spec.d_models {
            for h in &spec.heads {
                if h.kind == HeadKind::Cepr {
                    return Err(Error::Mode("cepr needs encoder states; the head benchmark is decoder-only".into()));
                }
                let mut cfg = h.clone();
                cfg.d_model = d;
                out.push(bench_one(spec, &cfg, v)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mos_is_three_softmaxes() {
        let s = head_macs(&HeadConfig::new(HeadKind::Softmax, 64), 5000, 200, 0);
        let m = head_macs(&HeadConfig::new(HeadKind::Mos, 64), 5000, 200, 0);
        assert_eq!(m, 3 * s);
    }

    #[test]
    fn cpr_ratio_closed_form() {
        let s = head_macs(&HeadConfig::new(HeadKind::Softmax, 128), 10_000, 200, 0) as f64;
        let c = head_macs(&HeadConfig::new(HeadKind::Cpr, 128), 10_000, 200, 0) as f64;
        assert!((c / s - (2.0 + 320.0 / 10_000.0)).abs() < 1e-12);
        let single = head_macs(&HeadConfig::new(HeadKind::Cpr, 128).with_k(0, 100), 10_000, 200, 0) as f64;
        assert!((single / s - (1.0 + 300.0 / 10_000.0)).abs() < 1e-12);
    }

    #[test]
    fn cpr_cheaper_than_mos_on_a_grid() {
        for v in [321, 400, 1000, 5000, 50_000] {
            for d in [16, 128, 768] {
                let cpr = HeadConfig::new(HeadKind::Cpr, d);
                let single = HeadConfig::new(HeadKind::Cpr, d).with_k(0, 100);
                for m in 2..6 {
                    let mut mos = HeadConfig::new(HeadKind::Mos, d);
                    mos.mos_components = m;
                    assert!(head_macs(&single, v, 200, 0) < head_macs(&mos, v, 200, 0));
                    if m >= 3 {
                        assert!(head_macs(&cpr, v, 200, 0) < head_macs(&mos, v, 200, 0));
                    }
                }
                // Ranking W(k1) by the second reranker costs a full V·d pass.
                let mut mos2 = HeadConfig::new(HeadKind::Mos, d);
                mos2.mos_components = 2;
                assert!(head_macs(&cpr, v, 200, 0) > head_macs(&mos2, v, 200, 0));
            }
        }
    }

    #[test]
    fn quantiles() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&x, 0.5), 3.0);
        assert_eq!(quantile(&x, 0.25), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }

    #[test]
    fn spec_validation() {
        let mut s = BenchSpec::default();
        s.reps = 5;
        assert!(s.validate().is_err());
        s.reps = 10;
        s.vocab_sizes = vec![100];
        assert!(s.validate().is_err());
    }

    #[test]
    fn small_grid_runs() {
        let spec = BenchSpec {
            vocab_sizes: vec![64],
            d_models: vec![8],
            heads: HeadKind::ALL.iter().filter(|k| **k != HeadKind::Cepr).map(|&k| HeadConfig::new(k, 8).with_k(2, 4)).collect(),
            context_len: 10,
            n_seqs: 2,
            reps: 10,
            warmup: 3,
            seed: 1,
        };
        let r = bench_heads(&spec).unwrap();
        assert_eq!(r.len(), 9);
        assert!(r.iter().all(|b| b.median_us > 0.0 && b.iqr_us >= 0.0));
        assert!(r[0].to_string().starts_with("bench head=softmax V=64 d=8 median_us="));
    }
}
