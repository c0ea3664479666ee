use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use super::fused::{self, AttnLayout};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, MatView, Real, Tensor};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    /// tanh approximation used by GPT-2.
    Gelu,
    Tanh,
    Sigmoid,
    Exp,
    Recip,
}

/// A group of flat indices normalized together by [`Graph::segment_softmax`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Segment {
    pub range: Range<usize>,
    pub extra: Vec<usize>,
}

impl Segment {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.range.clone().chain(self.extra.iter().copied())
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary),
    LogFloor(Var, T),
    LogSoftmax(Var, Option<Arc<Vec<bool>>>),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    GatherRows(Var, Arc<Vec<Option<usize>>>),
    ScatterMean {
        values: Var,
        ids: Arc<Vec<usize>>,
        counts: Arc<Vec<usize>>,
    },
    ConcatCols(Vec<Var>),
    ConcatFlat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceFlat {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Pick(Var, Arc<Vec<usize>>),
    SparseDot {
        a: Var,
        b: Var,
        pairs: Arc<Vec<(usize, usize)>>,
    },
    PairAdd {
        a: Var,
        b: Var,
        pairs: Arc<Vec<(usize, usize)>>,
    },
    ScatterAdd {
        base: Option<Var>,
        src: Var,
        entries: Arc<Vec<(usize, usize, T)>>,
    },
    Override {
        base: Var,
        src: Var,
        positions: Arc<Vec<usize>>,
    },
    Select {
        candidates: Vec<Var>,
        choice: Arc<Vec<u8>>,
    },
    SegmentSoftmax(Var, Arc<Vec<Segment>>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(T, T)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttnLayout>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Computation tape. Build one per forward pass and drop it after backward.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    record: bool,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_index(op: &'static str, index: usize, extent: usize) -> Result<()> {
    if index >= extent {
        Err(Error::Index { op, index, extent })
    } else {
        Ok(())
    }
}

impl<T: Real> Graph<T> {
    /// A recording graph: ops on trainable inputs can be differentiated.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
            params: HashMap::new(),
        }
    }

    /// A graph that only evaluates values; `backward` yields no gradients.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            record: false,
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Free input that receives a gradient (used by gradient checks).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: self.record,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node, so
    /// tied weights share one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Leaf,
            requires_grad: self.record && p.trainable,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatView::row_major(self.value(a).data(), m, k),
            MatView::row_major(self.value(b).data(), k, n),
            &mut out,
            n,
            T::zero(),
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatView::row_major(self.value(a).data(), m, k),
            MatView::row_major(self.value(b).data(), n, k).t(),
            &mut out,
            n,
            T::zero(),
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), &[a, b]))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `row` (length = columns of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.dims2(a);
        if self.value(row).len() != cols {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let ta = self.value(a);
        let data = ta
            .data()
            .chunks(cols.max(1))
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(&x, &y)| x + y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    /// Adds `col[r]` to every entry of row `r`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(a);
        if self.value(col).len() != rows {
            return Err(Error::shape("add_col", self.shape(a), self.shape(col)));
        }
        let c = self.value(col).data();
        let ta = self.value(a);
        let data = (0..rows * cols).map(|i| ta.data()[i] + c[i / cols]).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddCol(a, col), &[a, col]))
    }

    /// Multiplies every entry of row `r` by `col[r]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(a);
        if self.value(col).len() != rows {
            return Err(Error::shape("mul_col", self.shape(a), self.shape(col)));
        }
        let c = self.value(col).data();
        let ta = self.value(a);
        let data = (0..rows * cols).map(|i| ta.data()[i] * c[i / cols]).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x * c).collect())?;
        Ok(self.push(t, Op::Scale(a, c), &[a]))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x + c).collect())?;
        Ok(self.push(t, Op::AddScalar(a), &[a]))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let tx = self.value(x);
        let f: fn(T) -> T = match kind {
            Unary::Gelu => gelu,
            Unary::Tanh => |v: T| v.tanh(),
            Unary::Sigmoid => sigmoid,
            Unary::Exp => |v: T| v.exp(),
            Unary::Recip => |v: T| v.recip(),
        };
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| f(v)).collect())?;
        Ok(self.push(t, Op::Unary(x, kind), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Recip)
    }

    /// `ln(max(x, floor))`; entries at or below the floor get no gradient.
    pub fn log_floor(&mut self, x: Var, floor: T) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|&v| v.max(floor).ln()).collect(),
        )?;
        Ok(self.push(t, Op::LogFloor(x, floor), &[x]))
    }

    /// Row-wise log-softmax over the last axis, max-shifted for stability.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.log_softmax_inner(x, None)
    }

    /// Log-softmax where `mask[i] == false` entries are excluded and come out
    /// as `-inf` (probability zero). Every row needs one unmasked entry.
    pub fn log_softmax_masked(&mut self, x: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("log_softmax_masked", self.shape(x), &[mask.len()]));
        }
        self.log_softmax_inner(x, Some(mask))
    }

    fn log_softmax_inner(&mut self, x: Var, mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        if cols == 0 {
            return Err(Error::shape("log_softmax", tx.shape(), &[1]));
        }
        let live = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
        let mut out = vec![T::neg_infinity(); tx.len()];
        for (r, row) in tx.data().chunks(cols).enumerate() {
            let base = r * cols;
            let mut max = T::neg_infinity();
            for (c, &v) in row.iter().enumerate() {
                if live(base + c) {
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!("log_softmax input {v} at row {r}")));
                    }
                    max = max.max(v);
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::Numeric(format!("log_softmax row {r} has no unmasked entry")));
            }
            let mut sum = T::zero();
            for (c, &v) in row.iter().enumerate() {
                if live(base + c) {
                    sum += (v - max).exp();
                }
            }
            let lse = max + sum.ln();
            for (c, &v) in row.iter().enumerate() {
                if live(base + c) {
                    out[base + c] = v - lse;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LogSoftmax(x, mask), &[x]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ls = self.log_softmax(x)?;
        self.exp(ls)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.is_empty() {
            return Err(Error::EmptyBatch("mean of an empty tensor".into()));
        }
        let s: T = tx.data().iter().copied().sum();
        let m = s / T::lit(tx.len() as f64);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), &[x]))
    }

    /// Row sums as a `[rows × 1]` column.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols().max(1);
        let data: Vec<T> = tx.data().chunks(cols).map(|r| r.iter().copied().sum()).collect();
        let n = data.len();
        Ok(self.push(Tensor::new(vec![n, 1], data)?, Op::SumCols(x), &[x]))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ids: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
        self.gather_rows_or_zero(table, &ids)
    }

    /// Like [`Graph::gather_rows`] but `None` yields a zero row.
    pub fn gather_rows_or_zero(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, cols) = (tt.rows(), tt.cols());
        let mut out = vec![T::zero(); ids.len() * cols];
        for (r, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                check_index("gather_rows", id, rows)?;
                out[r * cols..(r + 1) * cols].copy_from_slice(tt.row(id));
            }
        }
        let t = Tensor::new(vec![ids.len(), cols], out)?;
        Ok(self.push(t, Op::GatherRows(table, Arc::new(ids.to_vec())), &[table]))
    }

    /// Averages the rows of `values` that share an id into a `[vocab × d]`
    /// table. Returns the table and per-id occurrence counts; absent ids give
    /// zero rows with count 0.
    pub fn scatter_mean(&mut self, values: Var, ids: &[usize], vocab: usize) -> Result<(Var, Vec<usize>)> {
        let tv = self.value(values);
        let cols = tv.cols();
        if ids.len() != tv.rows() {
            return Err(Error::shape("scatter_mean", tv.shape(), &[ids.len()]));
        }
        let mut counts = vec![0usize; vocab];
        for &id in ids {
            check_index("scatter_mean", id, vocab)?;
            counts[id] += 1;
        }
        let mut out = vec![T::zero(); vocab * cols];
        for (r, &id) in ids.iter().enumerate() {
            let inv = T::lit(counts[id] as f64).recip();
            for (o, &v) in out[id * cols..(id + 1) * cols].iter_mut().zip(tv.row(r)) {
                *o += v * inv;
            }
        }
        let t = Tensor::new(vec![vocab, cols], out)?;
        let var = self.push(
            t,
            Op::ScatterMean {
                values,
                ids: Arc::new(ids.to_vec()),
                counts: Arc::new(counts.clone()),
            },
            &[values],
        );
        Ok((var, counts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = self.value(p);
            if tp.rows() != rows {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), tp.shape()));
            }
            widths.push(tp.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Concatenates the flattened inputs into one 1-D tensor.
    pub fn concat_flat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let n = out.len();
        Ok(self.push(Tensor::new(vec![n], out)?, Op::ConcatFlat(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        if start + len > cols {
            return Err(Error::shape("slice_cols", tx.shape(), &[start + len]));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![rows, len], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_flat(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if start + len > tx.len() {
            return Err(Error::shape("slice_flat", tx.shape(), &[start + len]));
        }
        let t = Tensor::new(vec![len], tx.data()[start..start + len].to_vec())?;
        Ok(self.push(t, Op::SliceFlat { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// `out[r] = x[r, cols[r]]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if cols.len() != tx.rows() {
            return Err(Error::shape("pick", tx.shape(), &[cols.len()]));
        }
        let mut out = Vec::with_capacity(cols.len());
        for (r, &c) in cols.iter().enumerate() {
            check_index("pick", c, tx.cols())?;
            out.push(tx.at(r, c));
        }
        let t = Tensor::new(vec![cols.len()], out)?;
        Ok(self.push(t, Op::Pick(x, Arc::new(cols.to_vec())), &[x]))
    }

    /// `out[p] = a[i_p] · b[j_p]` for row pairs `(i_p, j_p)`.
    pub fn sparse_dot(&mut self, a: Var, b: Var, pairs: Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::shape("sparse_dot", ta.shape(), tb.shape()));
        }
        let mut out = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs.iter() {
            check_index("sparse_dot", i, ta.rows())?;
            check_index("sparse_dot", j, tb.rows())?;
            out.push(dot(ta.row(i), tb.row(j)));
        }
        let t = Tensor::new(vec![pairs.len()], out)?;
        Ok(self.push(t, Op::SparseDot { a, b, pairs }, &[a, b]))
    }

    /// `out[p, :] = a[i_p] + b[j_p]`.
    pub fn pair_add(&mut self, a: Var, b: Var, pairs: Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let d = ta.cols();
        if d != tb.cols() {
            return Err(Error::shape("pair_add", ta.shape(), tb.shape()));
        }
        let mut out = Vec::with_capacity(pairs.len() * d);
        for &(i, j) in pairs.iter() {
            check_index("pair_add", i, ta.rows())?;
            check_index("pair_add", j, tb.rows())?;
            out.extend(ta.row(i).iter().zip(tb.row(j)).map(|(&x, &y)| x + y));
        }
        let t = Tensor::new(vec![pairs.len(), d], out)?;
        Ok(self.push(t, Op::PairAdd { a, b, pairs }, &[a, b]))
    }

    /// `out = base + Σ w·src[s]` accumulated into flat position `dst` for each
    /// entry `(dst, s, w)`. Without a base the output starts at zero.
    pub fn scatter_add(
        &mut self,
        base: Option<Var>,
        shape: &[usize],
        src: Var,
        entries: Arc<Vec<(usize, usize, T)>>,
    ) -> Result<Var> {
        let mut out = match base {
            Some(b) => {
                if self.shape(b) != shape {
                    return Err(Error::shape("scatter_add", self.shape(b), shape));
                }
                self.value(b).data().to_vec()
            }
            None => vec![T::zero(); shape.iter().product()],
        };
        let ts = self.value(src).data();
        for &(dst, s, w) in entries.iter() {
            check_index("scatter_add", dst, out.len())?;
            check_index("scatter_add", s, ts.len())?;
            out[dst] += w * ts[s];
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        let inputs: Vec<Var> = base.into_iter().chain(std::iter::once(src)).collect();
        Ok(self.push(t, Op::ScatterAdd { base, src, entries }, &inputs))
    }

    /// Copy of `base` with flat `positions[i]` replaced by `src[i]`.
    /// Positions must be distinct.
    pub fn override_at(&mut self, base: Var, src: Var, positions: Arc<Vec<usize>>) -> Result<Var> {
        let mut out = self.value(base).data().to_vec();
        let ts = self.value(src).data();
        if ts.len() != positions.len() {
            return Err(Error::shape("override_at", self.shape(src), &[positions.len()]));
        }
        let mut seen = vec![false; out.len()];
        for (i, &p) in positions.iter().enumerate() {
            check_index("override_at", p, out.len())?;
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::Config(format!("override_at: duplicate position {p}")));
            }
            out[p] = ts[i];
        }
        let t = Tensor::new(self.shape(base).to_vec(), out)?;
        Ok(self.push(t, Op::Override { base, src, positions }, &[base, src]))
    }

    /// Elementwise choice: `out[i] = candidates[choice[i]][i]`.
    pub fn select(&mut self, candidates: &[Var], choice: Arc<Vec<u8>>) -> Result<Var> {
        let shape = self.shape(candidates[0]).to_vec();
        for &c in candidates {
            if self.shape(c) != shape.as_slice() {
                return Err(Error::shape("select", &shape, self.shape(c)));
            }
        }
        if choice.len() != self.value(candidates[0]).len() {
            return Err(Error::shape("select", &shape, &[choice.len()]));
        }
        let mut out = Vec::with_capacity(choice.len());
        for (i, &c) in choice.iter().enumerate() {
            check_index("select", c as usize, candidates.len())?;
            out.push(self.value(candidates[c as usize]).data()[i]);
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Select {
                candidates: candidates.to_vec(),
                choice,
            },
            candidates,
        ))
    }

    /// Softmax within each index group of the flattened input. Entries not
    /// covered by any segment come out as zero.
    pub fn segment_softmax(&mut self, x: Var, segments: Arc<Vec<Segment>>) -> Result<Var> {
        let tx = self.value(x);
        let xs = tx.data();
        let mut out = vec![T::zero(); xs.len()];
        for (s, seg) in segments.iter().enumerate() {
            let mut max = T::neg_infinity();
            for i in seg.indices() {
                check_index("segment_softmax", i, xs.len())?;
                if !xs[i].is_finite() {
                    return Err(Error::Numeric(format!("segment_softmax input {} in segment {s}", xs[i])));
                }
                max = max.max(xs[i]);
            }
            if max == T::neg_infinity() {
                return Err(Error::Numeric(format!("segment {s} is empty")));
            }
            let mut sum = T::zero();
            for i in seg.indices() {
                let e = (xs[i] - max).exp();
                out[i] = e;
                sum += e;
            }
            for i in seg.indices() {
                out[i] /= sum;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::SegmentSoftmax(x, segments), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tg.len() != tx.cols() || tb.len() != tx.cols() {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let (out, stats) = fused::layer_norm_forward(tx, tg.data(), tb.data(), eps);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta]))
    }

    /// Multi-head scaled dot-product attention over independent segments.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Arc<AttnLayout>) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        layout.validate(tq.shape(), tk.shape(), tv.shape())?;
        let (out, probs) = fused::attention_forward(tq, tk, tv, &layout);
        Ok(self.push(out, Op::Attention { q, k, v, layout, probs }, &[q, k, v]))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.nodes.iter().map(|n| n.param).collect(),
        })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }

    fn acc_scaled(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T], s: T) {
        if let Some(buf) = self.slot(grads, v) {
            for (b, &x) in buf.iter_mut().zip(g) {
                *b += s * x;
            }
        }
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = node.value.cols();
                let gv = MatView::row_major(g, m, n);
                let bv = self.value(*b).data();
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(gv, MatView::row_major(bv, k, n).t(), ga, k, T::one());
                }
                let av = self.value(*a).data();
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(MatView::row_major(av, m, k).t(), gv, gb, n, T::one());
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = node.value.cols();
                let gv = MatView::row_major(g, m, n);
                let bv = self.value(*b).data();
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(gv, MatView::row_major(bv, n, k), ga, k, T::one());
                }
                let av = self.value(*a).data();
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(gv.t(), MatView::row_major(av, m, k), gb, k, T::one());
                }
            }
            Op::Add(a, b) => {
                self.acc_scaled(grads, *a, g, T::one());
                self.acc_scaled(grads, *b, g, T::one());
            }
            Op::Sub(a, b) => {
                self.acc_scaled(grads, *a, g, T::one());
                self.acc_scaled(grads, *b, g, -T::one());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::AddRow(a, row) => {
                self.acc_scaled(grads, *a, g, T::one());
                let cols = node.value.cols();
                if let Some(gr) = self.slot(grads, *row) {
                    for chunk in g.chunks(cols) {
                        for (o, &x) in gr.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                }
            }
            Op::AddCol(a, col) => {
                self.acc_scaled(grads, *a, g, T::one());
                let cols = node.value.cols();
                if let Some(gc) = self.slot(grads, *col) {
                    for (o, chunk) in gc.iter_mut().zip(g.chunks(cols)) {
                        *o += chunk.iter().copied().sum();
                    }
                }
            }
            Op::MulCol(a, col) => {
                let cols = node.value.cols();
                let cv = self.value(*col).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for (idx, o) in ga.iter_mut().enumerate() {
                        *o += g[idx] * cv[idx / cols];
                    }
                }
                let av = self.value(*a).data();
                if let Some(gc) = self.slot(grads, *col) {
                    for (r, o) in gc.iter_mut().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        *o += dot(&g[span.clone()], &av[span]);
                    }
                }
            }
            Op::Scale(a, c) => self.acc_scaled(grads, *a, g, *c),
            Op::AddScalar(a) => self.acc_scaled(grads, *a, g, T::one()),
            Op::Unary(x, kind) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for idx in 0..gx.len() {
                        let d = match kind {
                            Unary::Gelu => gelu_grad(xv[idx]),
                            Unary::Tanh => T::one() - y[idx] * y[idx],
                            Unary::Sigmoid => y[idx] * (T::one() - y[idx]),
                            Unary::Exp => y[idx],
                            Unary::Recip => -y[idx] * y[idx],
                        };
                        gx[idx] += g[idx] * d;
                    }
                }
            }
            Op::LogFloor(x, floor) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for idx in 0..gx.len() {
                        if xv[idx] > *floor {
                            gx[idx] += g[idx] / xv[idx];
                        }
                    }
                }
            }
            Op::LogSoftmax(x, mask) => {
                let cols = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    let live = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                    for r in 0..node.value.rows() {
                        let span = r * cols..(r + 1) * cols;
                        let gsum: T = span.clone().filter(|&i| live(i)).map(|i| g[i]).sum();
                        for idx in span {
                            if live(idx) {
                                gx[idx] += g[idx] - y[idx].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let s = g[0] / T::lit(gx.len() as f64);
                    gx.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::SumCols(x) => {
                let cols = self.value(*x).cols().max(1);
                if let Some(gx) = self.slot(grads, *x) {
                    for (idx, o) in gx.iter_mut().enumerate() {
                        *o += g[idx / cols];
                    }
                }
            }
            Op::GatherRows(table, ids) => {
                let cols = node.value.cols();
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, id) in ids.iter().enumerate() {
                        if let Some(id) = *id {
                            for c in 0..cols {
                                gt[id * cols + c] += g[r * cols + c];
                            }
                        }
                    }
                }
            }
            Op::ScatterMean { values, ids, counts } => {
                let cols = node.value.cols();
                if let Some(gv) = self.slot(grads, *values) {
                    for (r, &id) in ids.iter().enumerate() {
                        let inv = T::lit(counts[id] as f64).recip();
                        for c in 0..cols {
                            gv[r * cols + c] += g[id * cols + c] * inv;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatFlat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc_scaled(grads, p, &g[offset..offset + n], T::one());
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.value(*x).cols();
                let len = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..node.value.rows() {
                        for c in 0..len {
                            gx[r * cols + start + c] += g[r * len + c];
                        }
                    }
                }
            }
            Op::SliceFlat { x, start } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, &v) in gx[*start..*start + g.len()].iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::Reshape(x) => self.acc_scaled(grads, *x, g, T::one()),
            Op::Pick(x, cols) => {
                let width = self.value(*x).cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &c) in cols.iter().enumerate() {
                        gx[r * width + c] += g[r];
                    }
                }
            }
            Op::SparseDot { a, b, pairs } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = av.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        for (o, &x) in ga[i * d..(i + 1) * d].iter_mut().zip(bv.row(j)) {
                            *o += g[p] * x;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        for (o, &x) in gb[j * d..(j + 1) * d].iter_mut().zip(av.row(i)) {
                            *o += g[p] * x;
                        }
                    }
                }
            }
            Op::PairAdd { a, b, pairs } => {
                let d = node.value.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for (p, &(i, _)) in pairs.iter().enumerate() {
                        for c in 0..d {
                            ga[i * d + c] += g[p * d + c];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (p, &(_, j)) in pairs.iter().enumerate() {
                        for c in 0..d {
                            gb[j * d + c] += g[p * d + c];
                        }
                    }
                }
            }
            Op::ScatterAdd { base, src, entries } => {
                if let Some(b) = base {
                    self.acc_scaled(grads, *b, g, T::one());
                }
                if let Some(gs) = self.slot(grads, *src) {
                    for &(dst, s, w) in entries.iter() {
                        gs[s] += w * g[dst];
                    }
                }
            }
            Op::Override { base, src, positions } => {
                if let Some(gb) = self.slot(grads, *base) {
                    let mut masked = g.to_vec();
                    for &p in positions.iter() {
                        masked[p] = T::zero();
                    }
                    for (o, v) in gb.iter_mut().zip(masked) {
                        *o += v;
                    }
                }
                if let Some(gs) = self.slot(grads, *src) {
                    for (o, &p) in gs.iter_mut().zip(positions.iter()) {
                        *o += g[p];
                    }
                }
            }
            Op::Select { candidates, choice } => {
                for (ci, &c) in candidates.iter().enumerate() {
                    if let Some(gc) = self.slot(grads, c) {
                        for (idx, &ch) in choice.iter().enumerate() {
                            if ch as usize == ci {
                                gc[idx] += g[idx];
                            }
                        }
                    }
                }
            }
            Op::SegmentSoftmax(x, segments) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for seg in segments.iter() {
                        let inner: T = seg.indices().map(|i| y[i] * g[i]).sum();
                        for i in seg.indices() {
                            gx[i] += y[i] * (g[i] - inner);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma).data();
                let (dx, dg, db) = fused::layer_norm_backward(tx, tg, stats, g);
                self.acc_scaled(grads, *x, &dx, T::one());
                self.acc_scaled(grads, *gamma, &dg, T::one());
                self.acc_scaled(grads, *beta, &db, T::one());
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (dq, dk, dv) =
                    fused::attention_backward(self.value(*q), self.value(*k), self.value(*v), layout, probs, g);
                self.acc_scaled(grads, *q, &dq, T::one());
                self.acc_scaled(grads, *k, &dk, T::one());
                self.acc_scaled(grads, *v, &dv, T::one());
            }
        }
    }
}

/// Gradients from one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<ParamId>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// `(parameter, gradient)` for every parameter the loss reached.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let id = (*p)?;
                let g = self.grads[i].as_ref()?;
                Some((id, Tensor::new(self.shapes[i].clone(), g.clone()).expect("gradient shape")))
            })
            .collect()
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
