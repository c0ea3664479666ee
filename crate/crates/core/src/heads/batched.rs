use std::collections::BTreeMap;
use std::sync::Arc;

use super::{need, need_id, HeadInput, HeadKind, HeadOutput, OutputHead};
use crate::autodiff::{Graph, Segment, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::partition::{build_cepr_partition, build_cpr_partition, Branch};
use crate::tensor::{Real, Tensor};

/// Word occurrences visible at one position: id → source rows.
type Occurrences = BTreeMap<usize, Vec<usize>>;

pub(super) fn forward<T: Real>(
    head: &OutputHead,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    inp: &HeadInput<'_>,
) -> Result<HeadOutput> {
    let n = inp.layout.total();
    let d = head.cfg.d_model;
    if g.shape(inp.hidden) != [n, d] {
        return Err(Error::shape("head hidden states", g.shape(inp.hidden), &[n, d]));
    }
    if inp.tokens.len() != inp.layout.lens.len() || inp.tokens.iter().zip(&inp.layout.lens).any(|(t, &l)| t.len() != l) {
        return Err(Error::shape(
            "head tokens",
            &inp.layout.lens,
            &inp.tokens.iter().map(Vec::len).collect::<Vec<_>>(),
        ));
    }
    let q = context_feature(head, g, store, inp)?;
    let w = g.param(store, head.embedding);
    let fv = need(head.proj.v, "L_V")?.forward(g, store, q)?;
    let logits_v = g.matmul_nt(fv, w)?;
    match head.cfg.kind {
        HeadKind::Softmax => Ok(HeadOutput::Logits(logits_v)),
        HeadKind::P => local_only(head, g, store, inp, q, logits_v).map(HeadOutput::Logits),
        HeadKind::C | HeadKind::R | HeadKind::Cpr | HeadKind::Cepr => {
            partitioned(head, g, store, inp, q, w, logits_v).map(HeadOutput::Logits)
        }
        HeadKind::Mos => mos(head, g, store, q, w, fv).map(HeadOutput::Probs),
        HeadKind::CopyNet => copynet(head, g, store, inp, q, logits_v).map(HeadOutput::Probs),
        HeadKind::PointerGen => pointer_gen(head, g, store, inp, q, logits_v).map(HeadOutput::Probs),
        HeadKind::PointerSentinel => pointer_sentinel(head, g, store, inp, q, logits_v).map(HeadOutput::Probs),
    }
}

fn context_feature<T: Real>(head: &OutputHead, g: &mut Graph<T>, store: &ParamStore<T>, inp: &HeadInput<'_>) -> Result<Var> {
    if !head.cfg.use_mi {
        return Ok(inp.hidden);
    }
    let (rows, cols) = head.cfg.mi_block;
    let want = rows * cols * head.cfg.d_model;
    let block = inp
        .block
        .ok_or_else(|| Error::shape("mi block", &[0], &[inp.layout.total(), want]))?;
    if g.shape(block) != [inp.layout.total(), want] {
        return Err(Error::shape("mi block", g.shape(block), &[inp.layout.total(), want]));
    }
    let m = need(head.proj.mi, "L_h")?.forward(g, store, block)?;
    let m = g.gelu(m)?;
    g.concat_cols(&[inp.hidden, m])
}

/// Per decoder row, the words of the prefix `0..=t` with the rows they occur at.
fn decoder_occurrences(inp: &HeadInput<'_>) -> Vec<Occurrences> {
    let mut out = Vec::with_capacity(inp.layout.total());
    for (s, toks) in inp.tokens.iter().enumerate() {
        let mut prefix = Occurrences::new();
        for (t, &x) in toks.iter().enumerate() {
            if !inp.special.contains(&x) {
                prefix.entry(x).or_default().push(inp.layout.row(s, t));
            }
            out.push(prefix.clone());
        }
    }
    out
}

/// Per sequence, the encoder words with the encoder rows they occur at.
fn encoder_occurrences(inp: &HeadInput<'_>) -> Result<Vec<Occurrences>> {
    let enc = inp
        .encoder
        .ok_or_else(|| Error::Mode("head needs encoder states".into()))?;
    if enc.tokens.len() != inp.tokens.len() {
        return Err(Error::shape("encoder tokens", &[enc.tokens.len()], &[inp.tokens.len()]));
    }
    Ok(enc
        .tokens
        .iter()
        .enumerate()
        .map(|(s, toks)| {
            let mut occ = Occurrences::new();
            for (j, &x) in toks.iter().enumerate() {
                if !inp.special.contains(&x) {
                    occ.entry(x).or_default().push(enc.layout.row(s, j));
                }
            }
            occ
        })
        .collect())
}

fn row_seqs(inp: &HeadInput<'_>) -> Vec<usize> {
    inp.layout.positions().map(|(s, _)| s).collect()
}

/// Averaged local-embedding scores `f_P[r] · mean_i L(src_i)` for a list of
/// `(row, occurrence rows)` entries, as a flat vector aligned with `entries`.
fn local_scores<T: Real>(
    g: &mut Graph<T>,
    f: Var,
    local: Var,
    entries: &[(usize, &[usize])],
) -> Result<(Var, Vec<(usize, usize, T)>)> {
    let mut pairs = Vec::new();
    let mut scatter = Vec::new();
    for (e, &(r, occ)) in entries.iter().enumerate() {
        let w = T::lit(1.0 / occ.len() as f64);
        for &i in occ {
            scatter.push((e, pairs.len(), w));
            pairs.push((r, i));
        }
    }
    let dots = g.sparse_dot(f, local, Arc::new(pairs))?;
    Ok((dots, scatter))
}

fn local_only<T: Real>(
    head: &OutputHead,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    inp: &HeadInput<'_>,
    q: Var,
    logits_v: Var,
) -> Result<Var> {
    let vocab = g.value(logits_v).cols();
    let occ = decoder_occurrences(inp);
    let fpd = need(head.proj.pd, "L_PD")?.forward(g, store, q)?;
    let ld = need(head.proj.ld, "L_LD")?.forward(g, store, q)?;
    let entries: Vec<(usize, &[usize])> = occ
        .iter()
        .enumerate()
        .flat_map(|(r, o)| o.values().map(move |rows| (r, rows.as_slice())))
        .collect();
    let targets: Vec<usize> = occ
        .iter()
        .enumerate()
        .flat_map(|(r, o)| o.keys().map(move |&x| r * vocab + x))
        .collect();
    let (dots, scatter) = local_scores(g, fpd, ld, &entries)?;
    let scatter: Vec<_> = scatter.into_iter().map(|(e, p, w)| (targets[e], p, w)).collect();
    let shape = g.shape(logits_v).to_vec();
    g.scatter_add(Some(logits_v), &shape, dots, Arc::new(scatter))
}

#[derive(Default)]
struct BranchEntries {
    pairs: Vec<(usize, usize)>,
    positions: Vec<usize>,
}

impl BranchEntries {
    fn push(&mut self, r: usize, x: usize, vocab: usize) {
        self.pairs.push((r, x));
        self.positions.push(r * vocab + x);
    }
}

fn partitioned<T: Real>(
    head: &OutputHead,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    inp: &HeadInput<'_>,
    q: Var,
    w: Var,
    logits_v: Var,
) -> Result<Var> {
    let kind = head.cfg.kind;
    let (k1, k2) = head.cfg.effective_k();
    let proj = &head.proj;
    let (n, vocab) = (g.value(logits_v).rows(), g.value(logits_v).cols());
    let f_r2 = match proj.r2 {
        Some(l) => Some(l.forward(g, store, q)?),
        None => None,
    };
    // W(k1) ranks by max(logits_V, logits_R2) over the whole vocabulary.
    let logits_r2 = match f_r2 {
        Some(f) if k1 > 0 => Some(g.matmul_nt(f, w)?),
        _ => None,
    };
    let dec_occ = if kind == HeadKind::R {
        vec![Occurrences::new(); n]
    } else {
        decoder_occurrences(inp)
    };
    let enc_occ = if kind == HeadKind::Cepr {
        Some(encoder_occurrences(inp)?)
    } else {
        None
    };
    let seqs = row_seqs(inp);

    let (mut ctx, mut enc, mut r1, mut r2) = Default::default();
    let (ctx, enc, r1, r2): (&mut BranchEntries, &mut BranchEntries, &mut BranchEntries, &mut BranchEntries) =
        (&mut ctx, &mut enc, &mut r1, &mut r2);
    let mut ctx_occ: Vec<(usize, &[usize])> = Vec::new();
    let mut enc_local: Vec<(usize, &[usize])> = Vec::new();
    {
        let lv = g.value(logits_v);
        let lr2 = logits_r2.map(|v| g.value(v));
        for r in 0..n {
            let ctx_ids: Vec<usize> = dec_occ[r].keys().copied().collect();
            let part = match &enc_occ {
                Some(e) => {
                    let enc_ids: Vec<usize> = e[seqs[r]].keys().copied().collect();
                    build_cepr_partition(lv.row(r), &ctx_ids, &enc_ids, k1)?
                }
                None => build_cpr_partition(lv.row(r), lr2.map(|t| t.row(r)), &ctx_ids, k1, k2)?,
            };
            for &x in &part.context_set {
                ctx.push(r, x, vocab);
                ctx_occ.push((r, dec_occ[r][&x].as_slice()));
            }
            for &x in &part.encoder_set {
                if part.branch[x] == Branch::Encoder {
                    enc.push(r, x, vocab);
                    let occ = &enc_occ.as_ref().expect("encoder set implies encoder input")[seqs[r]];
                    enc_local.push((r, occ[&x].as_slice()));
                }
            }
            for &x in &part.w1 {
                if part.branch[x] == Branch::Rerank1 {
                    r1.push(r, x, vocab);
                }
            }
            for &x in &part.w2 {
                if part.branch[x] == Branch::Rerank2 {
                    r2.push(r, x, vocab);
                }
            }
        }
    }

    let mut values = Vec::new();
    let mut positions = Vec::new();
    if !ctx.pairs.is_empty() {
        let fc = need(proj.c, "L_C")?.forward(g, store, q)?;
        let mut v = g.sparse_dot(fc, w, Arc::new(std::mem::take(&mut ctx.pairs)))?;
        if let (Some(pd), Some(ld)) = (proj.pd, proj.ld) {
            let fpd = pd.forward(g, store, q)?;
            let l = ld.forward(g, store, q)?;
            let (dots, scatter) = local_scores(g, fpd, l, &ctx_occ)?;
            v = g.scatter_add(Some(v), &[ctx_occ.len()], dots, Arc::new(scatter))?;
        }
        values.push(v);
        positions.append(&mut ctx.positions);
    }
    if !enc.pairs.is_empty() {
        let states = inp.encoder.expect("encoder entries imply encoder input").states;
        let fe = need(proj.e, "L_E")?.forward(g, store, q)?;
        let mut v = g.sparse_dot(fe, w, Arc::new(std::mem::take(&mut enc.pairs)))?;
        let fpe = need(proj.pe, "L_PE")?.forward(g, store, q)?;
        let le = need(proj.le, "L_LE")?.forward(g, store, states)?;
        let (dots, scatter) = local_scores(g, fpe, le, &enc_local)?;
        v = g.scatter_add(Some(v), &[enc_local.len()], dots, Arc::new(scatter))?;
        values.push(v);
        positions.append(&mut enc.positions);
    }
    if !r1.pairs.is_empty() {
        let f = need(proj.r1, "L_R1")?.forward(g, store, q)?;
        values.push(g.sparse_dot(f, w, Arc::new(std::mem::take(&mut r1.pairs)))?);
        positions.append(&mut r1.positions);
    }
    if !r2.pairs.is_empty() {
        let f = f_r2.expect("second reranker entries imply its projection");
        values.push(g.sparse_dot(f, w, Arc::new(std::mem::take(&mut r2.pairs)))?);
        positions.append(&mut r2.positions);
    }
    if values.is_empty() {
        return Ok(logits_v);
    }
    let src = g.concat_flat(&values)?;
    g.override_at(logits_v, src, Arc::new(positions))
}

fn mos<T: Real>(head: &OutputHead, g: &mut Graph<T>, store: &ParamStore<T>, q: Var, w: Var, fv: Var) -> Result<Var> {
    let mut comps = vec![fv];
    for l in &head.proj.mos {
        comps.push(l.forward(g, store, q)?);
    }
    let gate = need(head.proj.mos_gate, "MoS gate")?.forward(g, store, q)?;
    let gate = g.softmax(gate)?;
    let mut out: Option<Var> = None;
    for (k, f) in comps.into_iter().enumerate() {
        let logits = g.matmul_nt(f, w)?;
        let p = g.softmax(logits)?;
        let pi = g.slice_cols(gate, k, 1)?;
        let term = g.mul_col(p, pi)?;
        out = Some(match out {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(out.expect("at least one component"))
}

/// Pointer candidates: `(row, source row, token)` triples plus the source states.
struct PointerSource {
    states: Var,
    pairs: Vec<(usize, usize)>,
    tokens: Vec<usize>,
}

fn pointer_source(inp: &HeadInput<'_>) -> Result<PointerSource> {
    let mut pairs = Vec::new();
    let mut tokens = Vec::new();
    match inp.encoder {
        Some(enc) => {
            if enc.tokens.len() != inp.tokens.len() {
                return Err(Error::shape("encoder tokens", &[enc.tokens.len()], &[inp.tokens.len()]));
            }
            for (r, (s, _)) in inp.layout.positions().enumerate() {
                for (j, &x) in enc.tokens[s].iter().enumerate() {
                    if !inp.special.contains(&x) {
                        pairs.push((r, enc.layout.row(s, j)));
                        tokens.push(x);
                    }
                }
            }
            Ok(PointerSource {
                states: enc.states,
                pairs,
                tokens,
            })
        }
        None => {
            // decoder-only: point into the prefix seen so far
            for (r, (s, t)) in inp.layout.positions().enumerate() {
                for (j, &x) in inp.tokens[s][..=t].iter().enumerate() {
                    if !inp.special.contains(&x) {
                        pairs.push((r, inp.layout.row(s, j)));
                        tokens.push(x);
                    }
                }
            }
            Ok(PointerSource {
                states: inp.hidden,
                pairs,
                tokens,
            })
        }
    }
}

/// Adds the scalar parameter `b` to every entry of the flat vector `x`.
fn add_param_scalar<T: Real>(g: &mut Graph<T>, x: Var, b: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n = g.value(x).len();
    let entries: Vec<(usize, usize, T)> = (0..n).map(|i| (i, 0, T::one())).collect();
    g.scatter_add(Some(x), &shape, b, Arc::new(entries))
}

fn copynet<T: Real>(
    head: &OutputHead,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    inp: &HeadInput<'_>,
    q: Var,
    logits_v: Var,
) -> Result<Var> {
    let (n, vocab) = (g.value(logits_v).rows(), g.value(logits_v).cols());
    let src = pointer_source(inp)?;
    let fpe = need(head.proj.pe, "L_PE")?.forward(g, store, q)?;
    let le = need(head.proj.le, "L_LE")?.forward(g, store, src.states)?;
    let dots = g.sparse_dot(fpe, le, Arc::new(src.pairs.clone()))?;
    let b = g.param(store, need_id(head.proj.pointer_bias, "copy bias")?);
    let scores = add_param_scalar(g, dots, b)?;
    let flat = g.reshape(logits_v, &[n * vocab])?;
    let x = g.concat_flat(&[flat, scores])?;
    let mut segs: Vec<Segment> = (0..n)
        .map(|r| Segment {
            range: r * vocab..(r + 1) * vocab,
            extra: Vec::new(),
        })
        .collect();
    for (p, &(r, _)) in src.pairs.iter().enumerate() {
        segs[r].extra.push(n * vocab + p);
    }
    let sm = g.segment_softmax(x, Arc::new(segs))?;
    let base = g.slice_flat(sm, 0, n * vocab)?;
    let base = g.reshape(base, &[n, vocab])?;
    let scatter: Vec<(usize, usize, T)> = src
        .pairs
        .iter()
        .zip(&src.tokens)
        .enumerate()
        .map(|(p, (&(r, _), &x))| (r * vocab + x, n * vocab + p, T::one()))
        .collect();
    g.scatter_add(Some(base), &[n, vocab], sm, Arc::new(scatter))
}

fn pointer_gen<T: Real>(
    head: &OutputHead,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    inp: &HeadInput<'_>,
    q: Var,
    logits_v: Var,
) -> Result<Var> {
    let proj = &head.proj;
    let (n, vocab) = (g.value(logits_v).rows(), g.value(logits_v).cols());
    let src = pointer_source(inp)?;
    let gq = g.param(store, need_id(proj.gen_query, "p_gen query")?);
    let z = g.matmul(inp.hidden, gq)?;
    let bptr = g.param(store, need_id(proj.ptr_bias, "b_ptr")?);
    let z = add_param_scalar(g, z, bptr)?;
    let p_gen = g.sigmoid(z)?;
    let has_src = {
        let mut h = vec![0u8; n];
        for &(r, _) in &src.pairs {
            h[r] = 1;
        }
        h
    };
    let ones = g.constant(Tensor::full(&[n, 1], T::one()));
    // rows with nothing to point at generate with weight one
    let choice: Vec<u8> = has_src.iter().map(|&h| 1 - h).collect();
    let gen_w = g.select(&[p_gen, ones], Arc::new(choice))?;
    let sv = g.softmax(logits_v)?;
    let gen = g.mul_col(sv, gen_w)?;
    if src.pairs.is_empty() {
        return Ok(gen);
    }
    let nz = g.scale(z, -T::one())?;
    let p_copy = g.sigmoid(nz)?;
    let fpe = need(proj.pe, "L_PE")?.forward(g, store, q)?;
    let le = need(proj.le, "L_LE")?.forward(g, store, src.states)?;
    let e = g.pair_add(fpe, le, Arc::new(src.pairs.clone()))?;
    let bvec = g.param(store, need_id(proj.ptr_b, "pointer bias vector")?);
    let e = g.add_row(e, bvec)?;
    let e = g.tanh(e)?;
    let v = g.param(store, need_id(proj.ptr_v, "pointer v")?);
    let a = g.matmul(e, v)?;
    let np = src.pairs.len();
    let a = g.reshape(a, &[np])?;
    let mut segs: Vec<Segment> = Vec::new();
    let mut start = 0;
    while start < np {
        let r = src.pairs[start].0;
        let mut end = start;
        while end < np && src.pairs[end].0 == r {
            end += 1;
        }
        segs.push(Segment {
            range: start..end,
            extra: Vec::new(),
        });
        start = end;
    }
    let pe = g.segment_softmax(a, Arc::new(segs))?;
    let rows: Vec<usize> = src.pairs.iter().map(|&(r, _)| r).collect();
    let pc = g.gather_rows(p_copy, &rows)?;
    let pc = g.reshape(pc, &[np])?;
    let m = g.mul(pe, pc)?;
    let scatter: Vec<(usize, usize, T)> = src
        .pairs
        .iter()
        .zip(&src.tokens)
        .enumerate()
        .map(|(p, (&(r, _), &x))| (r * vocab + x, p, T::one()))
        .collect();
    g.scatter_add(Some(gen), &[n, vocab], m, Arc::new(scatter))
}

fn pointer_sentinel<T: Real>(
    head: &OutputHead,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    inp: &HeadInput<'_>,
    q: Var,
    logits_v: Var,
) -> Result<Var> {
    let proj = &head.proj;
    let (n, vocab) = (g.value(logits_v).rows(), g.value(logits_v).cols());
    let src = pointer_source(inp)?;
    let sq = g.param(store, need_id(proj.sentinel_query, "sentinel query")?);
    let s0 = g.matmul(inp.hidden, sq)?;
    let s0 = g.reshape(s0, &[n])?;
    let fpe = need(proj.pe, "L_PE")?.forward(g, store, q)?;
    let le = need(proj.le, "L_LE")?.forward(g, store, src.states)?;
    let le = g.tanh(le)?;
    let dots = g.sparse_dot(fpe, le, Arc::new(src.pairs.clone()))?;
    let b = g.param(store, need_id(proj.pointer_bias, "sentinel bias")?);
    let scores = add_param_scalar(g, dots, b)?;
    let x = g.concat_flat(&[s0, scores])?;
    let mut segs: Vec<Segment> = (0..n)
        .map(|r| Segment {
            range: r..r + 1,
            extra: Vec::new(),
        })
        .collect();
    for (p, &(r, _)) in src.pairs.iter().enumerate() {
        segs[r].extra.push(n + p);
    }
    let sm = g.segment_softmax(x, Arc::new(segs))?;
    let gate = g.slice_flat(sm, 0, n)?;
    let gate = g.reshape(gate, &[n, 1])?;
    let sv = g.softmax(logits_v)?;
    let gen = g.mul_col(sv, gate)?;
    let scatter: Vec<(usize, usize, T)> = src
        .pairs
        .iter()
        .zip(&src.tokens)
        .enumerate()
        .map(|(p, (&(r, _), &x))| (r * vocab + x, n + p, T::one()))
        .collect();
    g.scatter_add(Some(gen), &[n, vocab], sm, Arc::new(scatter))
}
