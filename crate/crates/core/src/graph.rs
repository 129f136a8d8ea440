//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so the backward pass is a single reverse sweep. Values
//! of intermediate nodes stay readable after `backward`; the recorded
//! operations do not, and a second `backward` is rejected.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::scalar::{Real, MASK_FILL};
use crate::tensor::{check_shape, Tensor};

static NEXT_GRAPH_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a node on a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    graph: usize,
}

/// Attention mask applied inside [`Graph::attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Key `j` is visible to query `i` iff `j <= i`.
    Causal,
    /// Every key is visible to every query.
    Bidirectional,
}

impl AttentionMode {
    #[inline]
    pub fn allows(self, query: usize, key: usize) -> bool {
        match self {
            AttentionMode::Causal => key <= query,
            AttentionMode::Bidirectional => true,
        }
    }
}

/// Contiguous block of rows `[start, start + len)` forming one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    AddRow(usize, usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Gather { table: usize, ids: Vec<usize> },
    RmsNorm { x: usize, gain: usize, inv: Vec<S> },
    Rope { x: usize, heads: usize, cos: Vec<S>, sin: Vec<S> },
    Attention(AttentionSaved<S>),
    Silu(usize),
    Relu(usize),
    Dropout { x: usize, mask: Vec<S> },
    SelectRows { x: usize, rows: Vec<usize> },
    Pool { x: usize, groups: Vec<Vec<(usize, S)>> },
    NormalizeRows { x: usize, norms: Vec<S> },
    Softmax(usize),
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<S> },
    Sum(usize),
    Mean(usize),
    Consumed,
}

struct AttentionSaved<S> {
    q: usize,
    k: usize,
    v: usize,
    heads: usize,
    scale: S,
    segments: Vec<Segment>,
    /// Softmax probabilities, laid out per segment, per head, `len x len`.
    probs: Vec<S>,
    /// Inverted-dropout multipliers matching `probs`, if dropout was applied.
    keep: Option<Vec<S>>,
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    track: bool,
}

/// Dropout request: probability of zeroing plus the generator for the masks.
pub struct DropoutCtx<'a> {
    pub p: f64,
    pub rng: &'a mut crate::rng::Rng,
}

impl DropoutCtx<'_> {
    fn mask<S: Real>(&mut self, n: usize) -> Vec<S> {
        let keep = 1.0 - self.p;
        let scale = S::lit(1.0 / keep);
        (0..n).map(|_| if self.rng.uniform() < keep { scale } else { S::zero() }).collect()
    }
}

pub struct Graph<S: Real = f32> {
    id: usize,
    nodes: Vec<Node<S>>,
    consumed: bool,
    leaf_grads: Vec<Option<Vec<S>>>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn finite<S: Real>(op: &'static str, v: &[S]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFault { op })
    }
}

fn shape_err(msg: alloc::string::String) -> Error {
    Error::Shape(msg)
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
            leaf_grads: Vec::new(),
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.id >= self.nodes.len() {
            return Err(Error::DetachedTensor);
        }
        Ok(v.id)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, track: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, track });
        Ok(Var { id: self.nodes.len() - 1, graph: self.id })
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].track)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, t: &Tensor<S>) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, t: &Tensor<S>) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<Var> {
        check_shape(&shape, data.len())?;
        finite("constant", &data)?;
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<&[S]> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.nodes[self.idx(v)?].shape)
    }

    pub fn tensor(&self, v: Var) -> Result<Tensor<S>> {
        let n = &self.nodes[self.idx(v)?];
        Tensor::new(n.shape.clone(), n.value.clone())
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<S> {
        let val = self.value(v)?;
        if val.len() != 1 {
            return Err(shape_err(format!("expected scalar, got {} elements", val.len())));
        }
        Ok(val[0])
    }

    fn dims2(&self, i: usize) -> Result<(usize, usize)> {
        match self.nodes[i].shape[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(shape_err(format!("expected rank 2, got {s:?}"))),
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S, op: fn(usize, usize) -> Op<S>) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(shape_err(format!(
                "{name}: {:?} vs {:?}",
                self.nodes[ia].shape, self.nodes[ib].shape
            )));
        }
        let value: Vec<S> =
            self.nodes[ia].value.iter().zip(&self.nodes[ib].value).map(|(&x, &y)| f(x, y)).collect();
        finite(name, &value)?;
        let track = self.tracked(&[ia, ib]);
        self.push(self.nodes[ia].shape.clone(), value, op(ia, ib), track)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let ia = self.idx(a)?;
        let value: Vec<S> = self.nodes[ia].value.iter().map(|&x| x * c).collect();
        finite("scale", &value)?;
        let track = self.tracked(&[ia]);
        self.push(self.nodes[ia].shape.clone(), value, Op::Scale(ia, c), track)
    }

    /// `x [m, n] + b [n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(b)?);
        let (_, n) = self.dims2(ix)?;
        if self.nodes[ib].value.len() != n {
            return Err(shape_err(format!("add_row: bias of {} for width {n}", self.nodes[ib].value.len())));
        }
        let bias = &self.nodes[ib].value;
        let value: Vec<S> =
            self.nodes[ix].value.chunks(n).flat_map(|r| r.iter().zip(bias).map(|(&a, &b)| a + b)).collect();
        finite("add_row", &value)?;
        let track = self.tracked(&[ix, ib]);
        self.push(self.nodes[ix].shape.clone(), value, Op::AddRow(ix, ib), track)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ar, ac) = self.dims2(ia)?;
        let (br, bc) = self.dims2(ib)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err(format!("matmul: inner dims {k} vs {k2}")));
        }
        let mut out = vec![S::zero(); m * n];
        gemm(&self.nodes[ia].value, &self.nodes[ib].value, m, k, n, ta, tb, &mut out);
        finite("matmul", &out)?;
        let track = self.tracked(&[ia, ib]);
        self.push(vec![m, n], out, Op::MatMul { a: ia, b: ib, ta, tb, m, k, n }, track)
    }

    /// Row lookup `table[ids]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let (rows, d) = self.dims2(it)?;
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::TokenOutOfRange { id: id as u32, vocab: rows });
            }
            out.extend_from_slice(&self.nodes[it].value[id * d..(id + 1) * d]);
        }
        let track = self.tracked(&[it]);
        self.push(vec![ids.len(), d], out, Op::Gather { table: it, ids: ids.to_vec() }, track)
    }

    /// Row-wise RMS normalization with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: S) -> Result<Var> {
        let (ix, ig) = (self.idx(x)?, self.idx(gain)?);
        let (rows, d) = self.dims2(ix)?;
        if self.nodes[ig].value.len() != d {
            return Err(shape_err(format!("rms_norm: gain {} for width {d}", self.nodes[ig].value.len())));
        }
        let dn = S::lit(d as f64);
        let mut inv = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        let g = &self.nodes[ig].value;
        for r in self.nodes[ix].value.chunks(d) {
            let ms = r.iter().map(|&v| v * v).sum::<S>() / dn;
            let iv = S::one() / (ms + eps).sqrt();
            inv.push(iv);
            out.extend(r.iter().zip(g).map(|(&v, &gg)| v * iv * gg));
        }
        finite("rms_norm", &out)?;
        let track = self.tracked(&[ix, ig]);
        self.push(vec![rows, d], out, Op::RmsNorm { x: ix, gain: ig, inv }, track)
    }

    /// Rotary position embedding on each head of `x [rows, heads * d_head]`,
    /// rotating the pairs `(i, i + d_head / 2)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], heads: usize, theta: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let (rows, d) = self.dims2(ix)?;
        if positions.len() != rows || heads == 0 || d % heads != 0 || !(d / heads).is_multiple_of(2) {
            return Err(shape_err(format!("rope: {rows} rows, {} positions, width {d}, {heads} heads", positions.len())));
        }
        let dh = d / heads;
        let half = dh / 2;
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for &p in positions {
            for i in 0..half {
                let freq = num_traits::Float::powf(theta, -((2 * i) as f64) / dh as f64);
                let angle = p as f64 * freq;
                cos.push(S::lit(num_traits::Float::cos(angle)));
                sin.push(S::lit(num_traits::Float::sin(angle)));
            }
        }
        let src = &self.nodes[ix].value;
        let mut out = vec![S::zero(); rows * d];
        for r in 0..rows {
            for h in 0..heads {
                let base = r * d + h * dh;
                for i in 0..half {
                    let (c, s) = (cos[r * half + i], sin[r * half + i]);
                    let (x1, x2) = (src[base + i], src[base + half + i]);
                    out[base + i] = x1 * c - x2 * s;
                    out[base + half + i] = x1 * s + x2 * c;
                }
            }
        }
        let track = self.tracked(&[ix]);
        self.push(vec![rows, d], out, Op::Rope { x: ix, heads, cos, sin }, track)
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[rows, heads * d_head]`; rows of different segments
    /// never attend to each other. Disallowed logits receive an additive
    /// `-1e9` before the numerically stable softmax. When `dropout` is given
    /// the attention probabilities are dropped with inverted scaling.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        mode: AttentionMode,
        dropout: Option<&mut DropoutCtx<'_>>,
    ) -> Result<Var> {
        let (iq, ik, iv) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let (rows, d) = self.dims2(iq)?;
        if self.nodes[ik].shape != [rows, d] || self.nodes[iv].shape != [rows, d] {
            return Err(shape_err("attention: q, k, v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(format!("attention: width {d} not divisible by {heads} heads")));
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if covered != rows || segments.iter().any(|s| s.len == 0 || s.start + s.len > rows) {
            return Err(shape_err("attention: segments do not tile the rows".into()));
        }
        let dh = d / heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let fill = S::lit(MASK_FILL);
        let total: usize = segments.iter().map(|s| heads * s.len * s.len).sum();
        let mut probs = Vec::with_capacity(total);
        let (qv, kv) = (&self.nodes[iq].value, &self.nodes[ik].value);
        let mut scores = Vec::new();
        for seg in segments {
            let t = seg.len;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let qi = &qv[(seg.start + i) * d + off..(seg.start + i) * d + off + dh];
                    scores.clear();
                    for j in 0..t {
                        let kj = &kv[(seg.start + j) * d + off..(seg.start + j) * d + off + dh];
                        let dot = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<S>() * scale;
                        scores.push(if mode.allows(i, j) { dot } else { dot + fill });
                    }
                    let mx = scores.iter().copied().fold(S::neg_infinity(), S::max);
                    let mut sum = S::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        sum += *s;
                    }
                    probs.extend(scores.iter().map(|&e| e / sum));
                }
            }
        }
        let keep = dropout.map(|ctx| ctx.mask::<S>(total));
        let vv = &self.nodes[iv].value;
        let mut out = vec![S::zero(); rows * d];
        let mut off_p = 0;
        for seg in segments {
            let t = seg.len;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let o = &mut out[(seg.start + i) * d + off..(seg.start + i) * d + off + dh];
                    for j in 0..t {
                        let idx = off_p + i * t + j;
                        let p = match &keep {
                            Some(m) => probs[idx] * m[idx],
                            None => probs[idx],
                        };
                        if p == S::zero() {
                            continue;
                        }
                        let vj = &vv[(seg.start + j) * d + off..(seg.start + j) * d + off + dh];
                        for (oo, &x) in o.iter_mut().zip(vj) {
                            *oo += p * x;
                        }
                    }
                }
                off_p += t * t;
            }
        }
        finite("attention", &out)?;
        let track = self.tracked(&[iq, ik, iv]);
        let saved = AttentionSaved { q: iq, k: ik, v: iv, heads, scale, segments: segments.to_vec(), probs, keep };
        self.push(vec![rows, d], out, Op::Attention(saved), track)
    }

    /// Softmax probabilities recorded by an attention node, per segment, per
    /// head, row-major `len x len`.
    pub fn attention_probs(&self, v: Var) -> Result<&[S]> {
        match &self.nodes[self.idx(v)?].op {
            Op::Attention(saved) => Ok(&saved.probs),
            _ => Err(Error::Unsupported("not an attention node".into())),
        }
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let value: Vec<S> = self.nodes[ix].value.iter().map(|&v| v * sigmoid(v)).collect();
        finite("silu", &value)?;
        let track = self.tracked(&[ix]);
        self.push(self.nodes[ix].shape.clone(), value, Op::Silu(ix), track)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let value: Vec<S> = self.nodes[ix].value.iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let track = self.tracked(&[ix]);
        self.push(self.nodes[ix].shape.clone(), value, Op::Relu(ix), track)
    }

    /// Inverted dropout; a no-op when `ctx` is `None` or `p == 0`.
    pub fn dropout(&mut self, x: Var, ctx: Option<&mut DropoutCtx<'_>>) -> Result<Var> {
        let ctx = match ctx {
            Some(c) if c.p > 0.0 => c,
            _ => return Ok(x),
        };
        let ix = self.idx(x)?;
        let mask: Vec<S> = ctx.mask(self.nodes[ix].value.len());
        let value: Vec<S> = self.nodes[ix].value.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let track = self.tracked(&[ix]);
        self.push(self.nodes[ix].shape.clone(), value, Op::Dropout { x: ix, mask }, track)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let (n, d) = self.dims2(ix)?;
        if rows.is_empty() {
            return Err(Error::EmptyPool);
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Index(format!("row {r} of {n}")));
            }
            out.extend_from_slice(&self.nodes[ix].value[r * d..(r + 1) * d]);
        }
        let track = self.tracked(&[ix]);
        self.push(vec![rows.len(), d], out, Op::SelectRows { x: ix, rows: rows.to_vec() }, track)
    }

    /// Weighted row sums: output row `g` is `sum_w w * x[row]` over `groups[g]`.
    pub fn pool(&mut self, x: Var, groups: &[Vec<(usize, S)>]) -> Result<Var> {
        let ix = self.idx(x)?;
        let (n, d) = self.dims2(ix)?;
        if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
            return Err(Error::EmptyPool);
        }
        let mut out = vec![S::zero(); groups.len() * d];
        let src = &self.nodes[ix].value;
        for (g, members) in groups.iter().enumerate() {
            let o = &mut out[g * d..(g + 1) * d];
            for &(r, w) in members {
                if r >= n {
                    return Err(Error::Index(format!("pool row {r} of {n}")));
                }
                for (oo, &v) in o.iter_mut().zip(&src[r * d..(r + 1) * d]) {
                    *oo += w * v;
                }
            }
        }
        finite("pool", &out)?;
        let track = self.tracked(&[ix]);
        self.push(vec![groups.len(), d], out, Op::Pool { x: ix, groups: groups.to_vec() }, track)
    }

    /// Scales each row to unit L2 norm; zero rows are an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (_, d) = self.dims2(ix)?;
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.nodes[ix].value.len());
        for r in self.nodes[ix].value.chunks(d) {
            let nrm = r.iter().map(|&v| v * v).sum::<S>().sqrt();
            if nrm == S::zero() {
                return Err(Error::DegenerateVector);
            }
            norms.push(nrm);
            out.extend(r.iter().map(|&v| v / nrm));
        }
        finite("normalize_rows", &out)?;
        let track = self.tracked(&[ix]);
        self.push(self.nodes[ix].shape.clone(), out, Op::NormalizeRows { x: ix, norms }, track)
    }

    /// Row-wise softmax of a rank-2 node.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (_, c) = self.dims2(ix)?;
        let mut out = Vec::with_capacity(self.nodes[ix].value.len());
        for r in self.nodes[ix].value.chunks(c) {
            let mx = r.iter().copied().fold(S::neg_infinity(), S::max);
            let start = out.len();
            let mut sum = S::zero();
            for &v in r {
                let e = (v - mx).exp();
                sum += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= sum;
            }
        }
        finite("softmax", &out)?;
        let track = self.tracked(&[ix]);
        self.push(self.nodes[ix].shape.clone(), out, Op::Softmax(ix), track)
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let (m, c) = self.dims2(il)?;
        if targets.len() != m {
            return Err(shape_err(format!("cross_entropy: {} targets for {m} rows", targets.len())));
        }
        let mut probs = Vec::with_capacity(m * c);
        let mut total = 0.0f64;
        for (r, &t) in self.nodes[il].value.chunks(c).zip(targets) {
            if t >= c {
                return Err(Error::Index(format!("target {t} of {c} classes")));
            }
            let (arg, mx) = r
                .iter()
                .copied()
                .enumerate()
                .fold((0, S::neg_infinity()), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
            let mut rest = S::zero();
            for (i, &v) in r.iter().enumerate() {
                if i != arg {
                    rest += (v - mx).exp();
                }
            }
            let lse = mx + rest.ln_1p();
            probs.extend(r.iter().map(|&v| (v - lse).exp()));
            total += (lse - r[t]).as_f64();
        }
        let loss = S::lit(total / m as f64);
        finite("cross_entropy", &[loss])?;
        let track = self.tracked(&[il]);
        self.push(vec![1], vec![loss], Op::CrossEntropy { logits: il, targets: targets.to_vec(), probs }, track)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.iter().copied().sum::<S>();
        finite("sum", &[s])?;
        let track = self.tracked(&[ix]);
        self.push(vec![1], vec![s], Op::Sum(ix), track)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = self.nodes[ix].value.len();
        let s = self.nodes[ix].value.iter().copied().sum::<S>() / S::lit(n as f64);
        finite("mean", &[s])?;
        let track = self.tracked(&[ix]);
        self.push(vec![1], vec![s], Op::Mean(ix), track)
    }

    /// Reverse sweep from a scalar `loss`. Afterwards [`Graph::grad`] returns
    /// `dloss/dleaf` for every trainable leaf (zeros when unreachable) and the
    /// tape refuses further operations.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let il = self.idx(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(shape_err(format!("backward needs a scalar loss, got shape {:?}", self.nodes[il].shape)));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![S::one()]);
        for id in (0..=il).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].track {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads)?;
        }
        self.leaf_grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match n.op {
                Op::Leaf if n.track => Some(grads[i].take().unwrap_or_else(|| vec![S::zero(); n.value.len()])),
                _ => None,
            })
            .collect();
        for n in &mut self.nodes {
            n.op = Op::Consumed;
        }
        self.consumed = true;
        Ok(())
    }

    /// Gradient of a trainable leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Result<&[S]> {
        let i = self.idx(v)?;
        self.leaf_grads
            .get(i)
            .and_then(|g| g.as_deref())
            .ok_or_else(|| Error::Unsupported("no gradient recorded for this node".into()))
    }

    fn backprop_node(&self, id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let nodes = &self.nodes;
        let track = |i: usize| nodes[i].track;
        match &nodes[id].op {
            Op::Leaf | Op::Consumed => {}
            Op::Add(a, b) => {
                if track(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if track(*b) {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if track(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if track(*b) {
                    acc(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if track(*a) {
                    acc(grads, *a, g.iter().zip(&nodes[*b].value).map(|(&x, &y)| x * y).collect());
                }
                if track(*b) {
                    acc(grads, *b, g.iter().zip(&nodes[*a].value).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => {
                acc(grads, *a, g.iter().map(|&x| x * *c).collect());
            }
            Op::AddRow(x, b) => {
                let n = nodes[*b].value.len();
                if track(*x) {
                    acc(grads, *x, g.to_vec());
                }
                if track(*b) {
                    let mut gb = vec![S::zero(); n];
                    for r in g.chunks(n) {
                        for (o, &v) in gb.iter_mut().zip(r) {
                            *o += v;
                        }
                    }
                    acc(grads, *b, gb);
                }
            }
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                if track(a) {
                    let mut ga = vec![S::zero(); m * k];
                    if ta {
                        // a is [k, m]: dA = op(B) · dC^T
                        gemm(bv, g, k, n, m, tb, true, &mut ga);
                    } else {
                        gemm(g, bv, m, n, k, false, !tb, &mut ga);
                    }
                    acc(grads, a, ga);
                }
                if track(b) {
                    let mut gb = vec![S::zero(); k * n];
                    if tb {
                        // b is [n, k]: dB = dC^T · op(A)
                        gemm(g, av, n, m, k, true, ta, &mut gb);
                    } else {
                        gemm(av, g, k, m, n, !ta, false, &mut gb);
                    }
                    acc(grads, b, gb);
                }
            }
            Op::Gather { table, ids } => {
                let d = nodes[*table].shape[1];
                let mut gt = vec![S::zero(); nodes[*table].value.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                acc(grads, *table, gt);
            }
            Op::RmsNorm { x, gain, inv } => {
                let d = nodes[*gain].value.len();
                let gv = &nodes[*gain].value;
                let xv = &nodes[*x].value;
                let dn = S::lit(d as f64);
                let mut gx = vec![S::zero(); xv.len()];
                let mut gg = vec![S::zero(); d];
                for (r, &iv) in inv.iter().enumerate() {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut dot = S::zero();
                    for j in 0..d {
                        let xh = xr[j] * iv;
                        gg[j] += gr[j] * xh;
                        dot += gr[j] * gv[j] * xh;
                    }
                    let mean = dot / dn;
                    for j in 0..d {
                        let xh = xr[j] * iv;
                        gx[r * d + j] = iv * (gr[j] * gv[j] - xh * mean);
                    }
                }
                if track(*x) {
                    acc(grads, *x, gx);
                }
                if track(*gain) {
                    acc(grads, *gain, gg);
                }
            }
            Op::Rope { x, heads, cos, sin } => {
                let d = nodes[*x].shape[1];
                let dh = d / heads;
                let half = dh / 2;
                let rows = nodes[*x].shape[0];
                let mut gx = vec![S::zero(); rows * d];
                for r in 0..rows {
                    for h in 0..*heads {
                        let base = r * d + h * dh;
                        for i in 0..half {
                            let (c, s) = (cos[r * half + i], sin[r * half + i]);
                            let (g1, g2) = (g[base + i], g[base + half + i]);
                            gx[base + i] = g1 * c + g2 * s;
                            gx[base + half + i] = g2 * c - g1 * s;
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
            Op::Silu(x) => {
                let gx = nodes[*x]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&v, &gg)| {
                        let s = sigmoid(v);
                        gg * s * (S::one() + v * (S::one() - s))
                    })
                    .collect();
                acc(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = nodes[*x].value.iter().zip(g).map(|(&v, &gg)| if v > S::zero() { gg } else { S::zero() }).collect();
                acc(grads, *x, gx);
            }
            Op::Dropout { x, mask } => {
                acc(grads, *x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
            }
            Op::SelectRows { x, rows } => {
                let d = nodes[*x].shape[1];
                let mut gx = vec![S::zero(); nodes[*x].value.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for (o, &v) in gx[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *o += v;
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Pool { x, groups } => {
                let d = nodes[*x].shape[1];
                let mut gx = vec![S::zero(); nodes[*x].value.len()];
                for (gi, members) in groups.iter().enumerate() {
                    let gr = &g[gi * d..(gi + 1) * d];
                    for &(r, w) in members {
                        for (o, &v) in gx[r * d..(r + 1) * d].iter_mut().zip(gr) {
                            *o += w * v;
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            Op::NormalizeRows { x, norms } => {
                let y = &nodes[id].value;
                let d = nodes[*x].shape[1];
                let mut gx = Vec::with_capacity(y.len());
                for (r, &nrm) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<S>();
                    gx.extend(yr.iter().zip(gr).map(|(&yy, &gg)| (gg - yy * dot) / nrm));
                }
                acc(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let y = &nodes[id].value;
                let c = nodes[id].shape[1];
                let mut gx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(c).zip(g.chunks(c)) {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<S>();
                    gx.extend(yr.iter().zip(gr).map(|(&yy, &gg)| yy * (gg - dot)));
                }
                acc(grads, *x, gx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = nodes[*logits].shape[1];
                let scale = g[0] / S::lit(targets.len() as f64);
                let mut gx: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * c + t] -= scale;
                }
                acc(grads, *logits, gx);
            }
            Op::Sum(x) => {
                acc(grads, *x, vec![g[0]; nodes[*x].value.len()]);
            }
            Op::Mean(x) => {
                let n = nodes[*x].value.len();
                acc(grads, *x, vec![g[0] / S::lit(n as f64); n]);
            }
        }
        Ok(())
    }

    fn attention_backward(&self, s: &AttentionSaved<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let (qv, kv, vv) = (&nodes[s.q].value, &nodes[s.k].value, &nodes[s.v].value);
        let d = nodes[s.q].shape[1];
        let dh = d / s.heads;
        let mut gq = vec![S::zero(); qv.len()];
        let mut gk = vec![S::zero(); kv.len()];
        let mut gv = vec![S::zero(); vv.len()];
        let mut off_p = 0;
        let mut dp = Vec::new();
        for seg in &s.segments {
            let t = seg.len;
            for h in 0..s.heads {
                let off = h * dh;
                let row = |i: usize| (seg.start + i) * d + off;
                for i in 0..t {
                    let go = &g[row(i)..row(i) + dh];
                    dp.clear();
                    for j in 0..t {
                        let idx = off_p + i * t + j;
                        let m = s.keep.as_ref().map_or(S::one(), |k| k[idx]);
                        let pd = s.probs[idx] * m;
                        // dV_j += p'_ij * dO_i
                        if pd != S::zero() {
                            for (o, &x) in gv[row(j)..row(j) + dh].iter_mut().zip(go) {
                                *o += pd * x;
                            }
                        }
                        let dpp = go.iter().zip(&vv[row(j)..row(j) + dh]).map(|(&a, &b)| a * b).sum::<S>();
                        dp.push(dpp * m);
                    }
                    let p = &s.probs[off_p + i * t..off_p + (i + 1) * t];
                    let dot = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum::<S>();
                    for j in 0..t {
                        let ds = p[j] * (dp[j] - dot) * s.scale;
                        if ds == S::zero() {
                            continue;
                        }
                        for c in 0..dh {
                            gq[row(i) + c] += ds * kv[row(j) + c];
                            gk[row(j) + c] += ds * qv[row(i) + c];
                        }
                    }
                }
                off_p += t * t;
            }
        }
        if nodes[s.q].track {
            acc(grads, s.q, gq);
        }
        if nodes[s.k].track {
            acc(grads, s.k, gk);
        }
        if nodes[s.v].track {
            acc(grads, s.v, gv);
        }
    }
}

fn acc<S: Real>(grads: &mut [Option<Vec<S>>], i: usize, g: Vec<S>) {
    match &mut grads[i] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `out += op(a) · op(b)` with `op(a)` of shape `[m, k]` and `op(b)` of
/// shape `[k, n]`. Storage is `[k, m]` for a transposed `a` and `[n, k]` for
/// a transposed `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize, ta: bool, tb: bool, out: &mut [S]) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let o = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = a[i * k + p];
                    if x == S::zero() {
                        continue;
                    }
                    for (oo, &y) in o.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *oo += x * y;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let ar = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let br = &b[j * k..(j + 1) * k];
                    out[i * n + j] += ar.iter().zip(br).map(|(&x, &y)| x * y).sum::<S>();
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let br = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let x = a[p * m + i];
                    if x == S::zero() {
                        continue;
                    }
                    for (oo, &y) in out[i * n..(i + 1) * n].iter_mut().zip(br) {
                        *oo += x * y;
                    }
                }
            }
        }
        (true, true) => {
            // op(a)·op(b) = (b · a)^T
            let mut tmp = vec![S::zero(); n * m];
            gemm(b, a, n, k, m, false, false, &mut tmp);
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] += tmp[j * m + i];
                }
            }
        }
    }
}
