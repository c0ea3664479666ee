//! Single-position head computations with plain loops and no autodiff.
//!
//! These mirror the batched graph path term by term and serve as its
//! reference; they are also convenient for inspecting one prediction.

use std::collections::BTreeMap;

use super::{need, need_id, HeadKind, Linear, OutputHead};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::partition::{build_cepr_partition, build_cpr_partition, Branch, VocabPartition};
use crate::tensor::Real;

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn gelu<T: Real>(x: T) -> T {
    crate::autodiff::gelu_scalar(x)
}

fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    let m = x.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Averaged local embeddings per word id, with occurrence counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocalEmbeddingTable<T> {
    rows: BTreeMap<usize, (Vec<T>, usize)>,
}

impl<T: Real> LocalEmbeddingTable<T> {
    /// Averages `map(state_i)` over occurrences of each id in `ids`.
    pub fn build(map: Linear, store: &ParamStore<T>, states: &[Vec<T>], ids: &[usize]) -> Self {
        let mut rows: BTreeMap<usize, (Vec<T>, usize)> = BTreeMap::new();
        for (s, &x) in states.iter().zip(ids) {
            let y = map.apply(store, s);
            let e = rows.entry(x).or_insert_with(|| (vec![T::zero(); y.len()], 0));
            for (a, b) in e.0.iter_mut().zip(&y) {
                *a += *b;
            }
            e.1 += 1;
        }
        for (v, c) in rows.values_mut() {
            let inv = T::lit(*c as f64).recip();
            v.iter_mut().for_each(|a| *a *= inv);
        }
        LocalEmbeddingTable { rows }
    }

    pub fn row(&self, x: usize) -> Option<&[T]> {
        self.rows.get(&x).map(|(v, _)| v.as_slice())
    }

    pub fn count(&self, x: usize) -> usize {
        self.rows.get(&x).map_or(0, |e| e.1)
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }
}

fn embedding_rows<T: Real>(head: &OutputHead, store: &ParamStore<T>) -> Vec<Vec<T>> {
    let w = &store.get(head.embedding).tensor;
    (0..w.rows()).map(|i| w.row(i).to_vec()).collect()
}

fn logits_for<T: Real>(f: &[T], w: &[Vec<T>]) -> Vec<T> {
    w.iter().map(|wx| dot(f, wx)).collect()
}

/// `q = h ⊕ GELU(L^h(block))` when Mi is enabled, else `h`.
pub fn build_context_feature<T: Real>(head: &OutputHead, store: &ParamStore<T>, h: &[T], block: Option<&[T]>) -> Result<Vec<T>> {
    if !head.cfg.use_mi {
        return Ok(h.to_vec());
    }
    let (r, c) = head.cfg.mi_block;
    let want = r * c * head.cfg.d_model;
    let block = block.ok_or_else(|| Error::shape("mi block", &[0], &[want]))?;
    if block.len() != want {
        return Err(Error::shape("mi block", &[block.len()], &[want]));
    }
    let m = need(head.proj.mi, "L_h")?.apply(store, block);
    Ok(h.iter().copied().chain(m.into_iter().map(gelu)).collect())
}

pub fn standard_logits<T: Real>(head: &OutputHead, store: &ParamStore<T>, q: &[T]) -> Result<Vec<T>> {
    let f = need(head.proj.v, "L_V")?.apply(store, q);
    Ok(logits_for(&f, &embedding_rows(head, store)))
}

/// Partition for one position, computing the reranker logits it needs.
pub fn partition_for<T: Real>(
    head: &OutputHead,
    store: &ParamStore<T>,
    q: &[T],
    context_ids: &[usize],
    encoder_ids: &[usize],
) -> Result<VocabPartition> {
    let lv = standard_logits(head, store, q)?;
    let (k1, k2) = head.cfg.effective_k();
    let ctx: &[usize] = if head.cfg.kind == HeadKind::R { &[] } else { context_ids };
    if head.cfg.kind == HeadKind::Cepr {
        return build_cepr_partition(&lv, ctx, encoder_ids, k1);
    }
    let lr2 = match head.proj.r2 {
        Some(l) if k1 > 0 => Some(logits_for(&l.apply(store, q), &embedding_rows(head, store))),
        _ => None,
    };
    build_cpr_partition(&lv, lr2.as_deref(), ctx, k1, k2)
}

/// Partitioned logits: the first matching branch scores each word.
pub fn cpr_logits<T: Real>(
    head: &OutputHead,
    store: &ParamStore<T>,
    q: &[T],
    partition: &VocabPartition,
    local: &LocalEmbeddingTable<T>,
) -> Result<Vec<T>> {
    partitioned_logits(head, store, q, partition, local, None)
}

pub fn cepr_logits<T: Real>(
    head: &OutputHead,
    store: &ParamStore<T>,
    q: &[T],
    partition: &VocabPartition,
    local_dec: &LocalEmbeddingTable<T>,
    local_enc: &LocalEmbeddingTable<T>,
) -> Result<Vec<T>> {
    partitioned_logits(head, store, q, partition, local_dec, Some(local_enc))
}

fn partitioned_logits<T: Real>(
    head: &OutputHead,
    store: &ParamStore<T>,
    q: &[T],
    partition: &VocabPartition,
    local_dec: &LocalEmbeddingTable<T>,
    local_enc: Option<&LocalEmbeddingTable<T>>,
) -> Result<Vec<T>> {
    let w = embedding_rows(head, store);
    let mut logits = standard_logits(head, store, q)?;
    partition.check_fresh(&logits)?;
    let p = &head.proj;
    let apply = |l: Option<Linear>| l.map(|l| l.apply(store, q));
    let (fc, fr1, fr2, fe, fpd, fpe) = (apply(p.c), apply(p.r1), apply(p.r2), apply(p.e), apply(p.pd), apply(p.pe));
    let missing = |what: &str| Error::Config(format!("partition uses a {what} branch the head does not have"));
    for (x, b) in partition.branch.iter().enumerate() {
        logits[x] = match b {
            Branch::Default => continue,
            Branch::Context => {
                let mut v = dot(fc.as_ref().ok_or_else(|| missing("context"))?, &w[x]);
                if let (Some(fpd), Some(row)) = (&fpd, local_dec.row(x)) {
                    v += dot(fpd, row);
                }
                v
            }
            Branch::Encoder => {
                let enc = local_enc.ok_or_else(|| Error::Mode("encoder branch needs encoder states".into()))?;
                let mut v = dot(fe.as_ref().ok_or_else(|| missing("encoder"))?, &w[x]);
                if let (Some(fpe), Some(row)) = (&fpe, enc.row(x)) {
                    v += dot(fpe, row);
                }
                v
            }
            Branch::Rerank1 => dot(fr1.as_ref().ok_or_else(|| missing("first reranker"))?, &w[x]),
            Branch::Rerank2 => dot(fr2.as_ref().ok_or_else(|| missing("second reranker"))?, &w[x]),
        };
    }
    Ok(logits)
}

/// Standard logits plus the local-embedding term on context words.
pub fn softmax_p_logits<T: Real>(
    head: &OutputHead,
    store: &ParamStore<T>,
    q: &[T],
    context_ids: &[usize],
    local: &LocalEmbeddingTable<T>,
) -> Result<Vec<T>> {
    let mut logits = standard_logits(head, store, q)?;
    let fpd = need(head.proj.pd, "L_PD")?.apply(store, q);
    let mut ids = context_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    for x in ids {
        if let Some(row) = local.row(x) {
            logits[x] += dot(&fpd, row);
        }
    }
    Ok(logits)
}

pub fn mos_probs<T: Real>(head: &OutputHead, store: &ParamStore<T>, q: &[T]) -> Result<Vec<T>> {
    let w = embedding_rows(head, store);
    let gate = softmax(&need(head.proj.mos_gate, "MoS gate")?.apply(store, q));
    let mut comps = vec![need(head.proj.v, "L_V")?];
    comps.extend(head.proj.mos.iter().copied());
    let mut out = vec![T::zero(); w.len()];
    for (l, &pi) in comps.iter().zip(&gate) {
        let p = softmax(&logits_for(&l.apply(store, q), &w));
        for (o, v) in out.iter_mut().zip(p) {
            *o += pi * v;
        }
    }
    Ok(out)
}

/// Vocabulary softmax plus copy mass; `src_states[j]` is the state of the
/// source token `src_ids[j]`.
pub fn copynet_probs<T: Real>(
    head: &OutputHead,
    store: &ParamStore<T>,
    q: &[T],
    src_states: &[Vec<T>],
    src_ids: &[usize],
) -> Result<Vec<T>> {
    let lv = standard_logits(head, store, q)?;
    let fpe = need(head.proj.pe, "L_PE")?.apply(store, q);
    let le = need(head.proj.le, "L_LE")?;
    let b = store.get(need_id(head.proj.pointer_bias, "copy bias")?).tensor.data()[0];
    let scores: Vec<T> = src_states.iter().map(|h| dot(&fpe, &le.apply(store, h)) + b).collect();
    let m = lv.iter().chain(&scores).fold(T::neg_infinity(), |a, &v| a.max(v));
    let mut mass: Vec<T> = lv.iter().map(|&v| (v - m).exp()).collect();
    for (&s, &x) in scores.iter().zip(src_ids) {
        mass[x] += (s - m).exp();
    }
    let z: T = mass.iter().copied().sum();
    if !z.is_finite() || z <= T::zero() {
        return Err(Error::Numeric(format!("copynet normalizer {}", z.as_f64())));
    }
    Ok(mass.into_iter().map(|v| v / z).collect())
}

pub fn pointer_generator_probs<T: Real>(
    head: &OutputHead,
    store: &ParamStore<T>,
    q: &[T],
    h: &[T],
    src_states: &[Vec<T>],
    src_ids: &[usize],
) -> Result<Vec<T>> {
    let p = &head.proj;
    let gen = softmax(&standard_logits(head, store, q)?);
    if src_ids.is_empty() {
        return Ok(gen);
    }
    let gq = store.get(need_id(p.gen_query, "p_gen query")?).tensor.data();
    let bptr = store.get(need_id(p.ptr_bias, "b_ptr")?).tensor.data()[0];
    let p_gen = sigmoid(dot(gq, h) + bptr);
    let fpe = need(p.pe, "L_PE")?.apply(store, q);
    let le = need(p.le, "L_LE")?;
    let bvec = store.get(need_id(p.ptr_b, "pointer bias vector")?).tensor.data();
    let v = store.get(need_id(p.ptr_v, "pointer v")?).tensor.data();
    let scores: Vec<T> = src_states
        .iter()
        .map(|s| {
            let l = le.apply(store, s);
            let e: Vec<T> = fpe.iter().zip(&l).zip(bvec).map(|((&a, &b), &c)| (a + b + c).tanh()).collect();
            dot(v, &e)
        })
        .collect();
    let pe = softmax(&scores);
    let mut out: Vec<T> = gen.into_iter().map(|x| p_gen * x).collect();
    for (&a, &x) in pe.iter().zip(src_ids) {
        out[x] += (T::one() - p_gen) * a;
    }
    Ok(out)
}

pub fn pointer_sentinel_probs<T: Real>(
    head: &OutputHead,
    store: &ParamStore<T>,
    q: &[T],
    h: &[T],
    src_states: &[Vec<T>],
    src_ids: &[usize],
) -> Result<Vec<T>> {
    let p = &head.proj;
    let gen = softmax(&standard_logits(head, store, q)?);
    let sq = store.get(need_id(p.sentinel_query, "sentinel query")?).tensor.data();
    let b = store.get(need_id(p.pointer_bias, "sentinel bias")?).tensor.data()[0];
    let fpe = need(p.pe, "L_PE")?.apply(store, q);
    let le = need(p.le, "L_LE")?;
    let mut scores = vec![dot(sq, h)];
    for s in src_states {
        let l: Vec<T> = le.apply(store, s).into_iter().map(|v| v.tanh()).collect();
        scores.push(dot(&fpe, &l) + b);
    }
    let sm = softmax(&scores);
    let mut out: Vec<T> = gen.into_iter().map(|x| sm[0] * x).collect();
    for (&a, &x) in sm[1..].iter().zip(src_ids) {
        out[x] += a;
    }
    Ok(out)
}
