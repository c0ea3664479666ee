//! Perplexity, exact KL on synthetic records, sampling and inspection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::EncodedRecord;
use crate::error::{Error, Result};
use crate::heads::PROB_FLOOR;
use crate::model::{lm_batch, Batch, Model};
use crate::params::ParamStore;
use crate::tensor::Real;
use crate::transformer::PAD;

/// Sequences per forward pass during evaluation.
const EVAL_CHUNK: usize = 8;

/// `exp` of the mean NLL over every non-padding next-token target.
pub fn perplexity<T: Real>(model: &Model, store: &ParamStore<T>, seqs: &[Vec<usize>]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let (batch, _) = lm_batch(chunk)?;
        let lp = model.log_probs(store, &batch)?;
        let mut row = 0;
        for s in chunk {
            for &x in &s[1..] {
                if x != PAD {
                    nll -= lp[row][x];
                    count += 1;
                }
                row += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyBatch("no evaluation targets".into()));
    }
    Ok((nll / count as f64).exp())
}

/// `KL(truth ‖ model)` with model probabilities floored.
pub fn kl_divergence(truth: &[(usize, f64)], model: &[f64]) -> Result<f64> {
    let mut kl = 0.0;
    for &(x, p) in truth {
        let q = *model.get(x).ok_or(Error::Index {
            op: "kl_divergence",
            index: x,
            extent: model.len(),
        })?;
        if p > 0.0 {
            kl += p * (p.ln() - q.max(PROB_FLOOR).ln());
        }
    }
    Ok(kl.max(0.0))
}

fn record_distributions<T: Real>(model: &Model, store: &ParamStore<T>, records: &[EncodedRecord]) -> Result<Vec<Vec<f64>>> {
    let v = model.vocab_size();
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_CHUNK * 4) {
        for r in chunk {
            if let Some(&x) = r.context.iter().chain(r.target.iter().map(|t| &t.0)).find(|&&x| x >= v) {
                return Err(Error::Config(format!("record id {x} is outside the model vocabulary of {v}")));
            }
        }
        let batch = Batch::decoder_only(chunk.iter().map(|r| r.context.clone()).collect());
        out.extend(model.next_distributions(store, &batch)?);
    }
    Ok(out)
}

/// Mean `KL(truth ‖ model)` per record split.
pub fn synthetic_kl<T: Real>(model: &Model, store: &ParamStore<T>, records: &[EncodedRecord]) -> Result<BTreeMap<String, f64>> {
    let dists = record_distributions(model, store, records)?;
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (r, d) in records.iter().zip(&dists) {
        let e = acc.entry(r.split.clone()).or_default();
        e.0 += kl_divergence(&r.target, d)?;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

/// Mean probability mass on each record's forbidden ids, over records that
/// have any.
pub fn repeat_prob<T: Real>(model: &Model, store: &ParamStore<T>, records: &[EncodedRecord]) -> Result<f64> {
    let with: Vec<EncodedRecord> = records.iter().filter(|r| !r.forbidden.is_empty()).cloned().collect();
    if with.is_empty() {
        return Err(Error::EmptyBatch("no records with forbidden ids".into()));
    }
    let dists = record_distributions(model, store, &with)?;
    let total: f64 = with.iter().zip(&dists).map(|(r, d)| forbidden_mass(d, &r.forbidden)).sum();
    Ok(total / with.len() as f64)
}

pub fn forbidden_mass(dist: &[f64], forbidden: &[usize]) -> f64 {
    let set: BTreeSet<usize> = forbidden.iter().copied().collect();
    set.iter().map(|&x| dist.get(x).copied().unwrap_or(0.0)).sum()
}

/// Draws from the `k` most probable ids after renormalizing; `k = 1` is
/// argmax. Ties rank the smaller id first.
pub fn sample_topk(probs: &[f64], k: usize, rng: &mut impl Rng) -> Result<usize> {
    if k == 0 {
        return Err(Error::Config("top-k sampling needs k >= 1".into()));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    if k == 1 {
        return Ok(order[0]);
    }
    let z: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut u = rng.random::<f64>() * z;
    for &i in &order {
        u -= probs[i];
        if u < 0.0 {
            return Ok(i);
        }
    }
    Ok(*order.last().expect("k >= 1"))
}

/// Extends `prompt` by `len` sampled ids, stopping early at the model's
/// maximum sequence length. Returns only the new ids.
pub fn generate_topk<T: Real>(model: &Model, store: &ParamStore<T>, prompt: &[usize], k: usize, len: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = prompt.to_vec();
    let max = model.transformer.cfg.max_seq_len;
    let mut out = Vec::with_capacity(len);
    while out.len() < len && seq.len() < max {
        let p = model.next_distributions(store, &Batch::decoder_only(vec![seq.clone()]))?.remove(0);
        let x = sample_topk(&p, k, &mut rng)?;
        seq.push(x);
        out.push(x);
    }
    Ok(out)
}

/// The `n` most probable next ids with their probabilities, descending.
pub fn inspect_topn<T: Real>(model: &Model, store: &ParamStore<T>, prompt: &[usize], n: usize) -> Result<Vec<(usize, f64)>> {
    let p = model.next_distributions(store, &Batch::decoder_only(vec![prompt.to_vec()]))?.remove(0);
    Ok(top_n(&p, n))
}

pub fn top_n(p: &[f64], n: usize) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    order.into_iter().take(n).map(|i| (i, p[i])).collect()
}

/// Fraction of distinct generated ids that also occur in the context.
pub fn copy_rate(generated: &[usize], context: &[usize]) -> f64 {
    let g: BTreeSet<usize> = generated.iter().copied().collect();
    if g.is_empty() {
        return 0.0;
    }
    let c: BTreeSet<usize> = context.iter().copied().collect();
    g.intersection(&c).count() as f64 / g.len() as f64
}

/// Mean copy rate over aligned generation/context lists.
pub fn mean_copy_rate(generations: &[Vec<usize>], contexts: &[Vec<usize>]) -> Result<f64> {
    if generations.len() != contexts.len() {
        return Err(Error::shape("mean_copy_rate", &[generations.len()], &[contexts.len()]));
    }
    if generations.is_empty() {
        return Err(Error::EmptyBatch("no generations".into()));
    }
    Ok(generations.iter().zip(contexts).map(|(g, c)| copy_rate(g, c)).sum::<f64>() / generations.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub perplexity: Option<f64>,
    pub mean_kl: BTreeMap<String, f64>,
    pub repeat_prob: Option<f64>,
    pub copy_rate: Option<f64>,
    /// Per prompt, the top words and their probabilities.
    pub topk_tables: Vec<(String, Vec<(String, f64)>)>,
}

impl EvalReport {
    /// `metric=<name> value=<f> split=<name>` lines.
    pub fn lines(&self, split: &str) -> String {
        let mut s = String::new();
        let mut put = |name: &str, v: f64, sp: &str| {
            writeln!(s, "metric={name} value={v:.6} split={sp}").expect("string write");
        };
        if let Some(p) = self.perplexity {
            put("perplexity", p, split);
        }
        for (sp, kl) in &self.mean_kl {
            put("mean_kl", *kl, sp);
        }
        if let Some(r) = self.repeat_prob {
            put("repeat_prob", r, split);
        }
        if let Some(c) = self.copy_rate {
            put("copy_rate", c, split);
        }
        s
    }
}
