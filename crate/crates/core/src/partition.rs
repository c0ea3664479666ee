//! Dynamic vocabulary partitions: which branch of a partitioned head scores
//! each word at one position.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Context,
    Encoder,
    Rerank1,
    Rerank2,
    Default,
}

/// Branch label for every vocabulary id, plus the sets it was built from.
/// All id sets are sorted ascending and duplicate free.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabPartition {
    pub branch: Vec<Branch>,
    pub context_set: Vec<usize>,
    pub encoder_set: Vec<usize>,
    pub w1: Vec<usize>,
    pub w2: Vec<usize>,
    /// Hash of the vocabulary logits the partition was derived from.
    pub fingerprint: u64,
}

impl VocabPartition {
    pub fn vocab_size(&self) -> usize {
        self.branch.len()
    }

    /// Ids carrying `b`, ascending.
    pub fn ids_with(&self, b: Branch) -> Vec<usize> {
        self.branch.iter().enumerate().filter(|(_, &x)| x == b).map(|(i, _)| i).collect()
    }

    /// Errors unless `logits_v` is the row this partition was built from.
    pub fn check_fresh<T: Real>(&self, logits_v: &[T]) -> Result<()> {
        if logits_v.len() != self.branch.len() || fingerprint(logits_v) != self.fingerprint {
            return Err(Error::StalePartition);
        }
        Ok(())
    }
}

pub fn fingerprint<T: Real>(scores: &[T]) -> u64 {
    let mut h = DefaultHasher::new();
    scores.len().hash(&mut h);
    for s in scores {
        s.as_f64().to_bits().hash(&mut h);
    }
    h.finish()
}

/// The `k` ids with the largest scores, ties to the smaller id, returned in
/// ascending id order.
pub fn topk_ids<T: Real>(scores: &[T], k: usize) -> Vec<usize> {
    let n = scores.len();
    if k >= n {
        return (0..n).collect();
    }
    if k == 0 {
        return Vec::new();
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let cmp = |a: &usize, b: &usize| {
        scores[*b]
            .as_f64()
            .total_cmp(&scores[*a].as_f64())
            .then(a.cmp(b))
    };
    ids.select_nth_unstable_by(k - 1, cmp);
    ids.truncate(k);
    ids.sort_unstable();
    ids
}

fn id_set(ids: &[usize], vocab: usize) -> Result<Vec<usize>> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.dedup();
    if let Some(&bad) = v.last().filter(|&&x| x >= vocab) {
        return Err(Error::Index {
            op: "partition id",
            index: bad,
            extent: vocab,
        });
    }
    Ok(v)
}

fn mark(branch: &mut [Branch], ids: &[usize], b: Branch) {
    for &i in ids {
        if branch[i] == Branch::Default {
            branch[i] = b;
        }
    }
}

/// Partition for the context/reranker head. `logits_r2` is required whenever
/// `k1 > 0`; `W(k1)` ranks by the elementwise max of both logit rows.
pub fn build_cpr_partition<T: Real>(
    logits_v: &[T],
    logits_r2: Option<&[T]>,
    context_ids: &[usize],
    k1: usize,
    k2: usize,
) -> Result<VocabPartition> {
    if k1 > k2 {
        return Err(Error::Config(format!("k1 = {k1} exceeds k2 = {k2}")));
    }
    let v = logits_v.len();
    let context_set = id_set(context_ids, v)?;
    let w2 = topk_ids(logits_v, k2);
    let w1 = if k1 == 0 {
        Vec::new()
    } else {
        let r2 = logits_r2.ok_or_else(|| Error::Config("first reranker needs the second reranker logits".into()))?;
        if r2.len() != v {
            return Err(Error::shape("build_cpr_partition", &[v], &[r2.len()]));
        }
        let m: Vec<T> = logits_v.iter().zip(r2).map(|(&a, &b)| if b > a { b } else { a }).collect();
        topk_ids(&m, k1)
    };
    let mut branch = vec![Branch::Default; v];
    mark(&mut branch, &context_set, Branch::Context);
    mark(&mut branch, &w1, Branch::Rerank1);
    mark(&mut branch, &w2, Branch::Rerank2);
    Ok(VocabPartition {
        branch,
        context_set,
        encoder_set: Vec::new(),
        w1,
        w2,
        fingerprint: fingerprint(logits_v),
    })
}

/// Partition for the encoder-aware head: CONTEXT > ENCODER > RERANK1 > DEFAULT.
pub fn build_cepr_partition<T: Real>(
    logits_v: &[T],
    context_ids: &[usize],
    encoder_ids: &[usize],
    k1: usize,
) -> Result<VocabPartition> {
    let v = logits_v.len();
    let context_set = id_set(context_ids, v)?;
    let encoder_set = id_set(encoder_ids, v)?;
    let w1 = topk_ids(logits_v, k1);
    let mut branch = vec![Branch::Default; v];
    mark(&mut branch, &context_set, Branch::Context);
    mark(&mut branch, &encoder_set, Branch::Encoder);
    mark(&mut branch, &w1, Branch::Rerank1);
    Ok(VocabPartition {
        branch,
        context_set,
        encoder_set,
        w1,
        w2: Vec::new(),
        fingerprint: fingerprint(logits_v),
    })
}
