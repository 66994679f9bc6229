//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Operations append nodes in execution order; [`Graph::backward`] walks the
//! tape once in reverse. Reductions are sequential in row-major order so the
//! same inputs always produce the same bits.

use std::sync::Arc;

use super::{Float, Tensor};
use crate::error::{invalid, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse row pattern: for each query row, the ascending list of key columns
/// it may read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowPattern {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    width: usize,
}

impl RowPattern {
    pub fn from_rows(rows: &[Vec<usize>], width: usize) -> Result<Self> {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        offsets.push(0);
        for (r, row) in rows.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::FullyMaskedRow { row: r });
            }
            if row.windows(2).any(|w| w[0] >= w[1]) || row.iter().any(|&c| c >= width) {
                return Err(invalid(format!("row {r} columns must be ascending and < {width}")));
            }
            cols.extend_from_slice(row);
            offsets.push(cols.len());
        }
        Ok(Self {
            offsets,
            cols,
            width,
        })
    }

    /// Every row reads every column.
    pub fn dense(rows: usize, width: usize) -> Self {
        let all: Vec<usize> = (0..width).collect();
        let mut cols = Vec::with_capacity(rows * width);
        let mut offsets = vec![0];
        for _ in 0..rows {
            cols.extend_from_slice(&all);
            offsets.push(cols.len());
        }
        Self {
            offsets,
            cols,
            width,
        }
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.cols[self.offsets[r]..self.offsets[r + 1]]
    }

    /// Block-diagonal union: `other` is appended with its rows and columns
    /// offset past `self`.
    pub fn block_diag(parts: &[&RowPattern]) -> Self {
        let mut offsets = vec![0];
        let mut cols = Vec::new();
        let mut base = 0;
        for p in parts {
            for r in 0..p.rows() {
                cols.extend(p.row(r).iter().map(|c| c + base));
                offsets.push(cols.len());
            }
            base += p.width;
        }
        Self {
            offsets,
            cols,
            width: base,
        }
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Offset(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Gelu(Var, Vec<F>),
    Silu(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Cosine {
        a: Var,
        b: Var,
        norm_a: F,
        norm_b: F,
    },
    Softmax(Var),
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    GatherRows {
        x: Var,
        rows: Arc<[usize]>,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Rotate {
        x: Var,
        cos: Arc<[F]>,
        sin: Arc<[F]>,
        head_dim: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        pattern: Arc<RowPattern>,
        heads: usize,
        scale: F,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recording tape. Single-threaded; build one per forward/backward step.
pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    backward_done: bool,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-6;

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    fn strip(s: &[usize]) -> &[usize] {
        let lead = s.iter().take_while(|&&d| d == 1).count();
        &s[lead..]
    }
    let (sa, sb) = (strip(a), strip(b));
    if sa == sb {
        return Some(if a.len() >= b.len() { a.to_vec() } else { b.to_vec() });
    }
    if sa.len() < sb.len() && sb.ends_with(sa) {
        return Some(b.to_vec());
    }
    if sb.len() < sa.len() && sa.ends_with(sb) {
        return Some(a.to_vec());
    }
    None
}

/// Calls `f(i, i % na, i % nb)` for `i < n`, where the larger of `na`, `nb`
/// equals `n` and the smaller divides it.
#[inline(always)]
fn cyclic(n: usize, na: usize, nb: usize, mut f: impl FnMut(usize, usize, usize)) {
    let small = na.min(nb);
    let mut start = 0;
    while start < n {
        let oa = if na == n { start } else { 0 };
        let ob = if nb == n { start } else { 0 };
        for j in 0..small {
            f(start + j, oa + j, ob + j);
        }
        start += small;
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed
/// order.
#[inline(always)]
fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    let mut lanes = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: F = ca.remainder().iter().zip(cb.remainder()).fold(F::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail
}

/// `y += a * x`.
#[inline(always)]
fn axpy<F: Float>(y: &mut [F], a: F, x: &[F]) {
    y.iter_mut().zip(x).for_each(|(y, &x)| *y += a * x);
}

fn acc<'a, F: Float>(grads: &'a mut [Option<Vec<F>>], v: Var, len: usize) -> &'a mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn gelu_parts<F: Float>(x: F) -> (F, F) {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let a = F::of(0.044715);
    let half = F::of(0.5);
    let inner = c * (x + a * x * x * x);
    // exp-based tanh; libm's tanh dominates the MLP cost otherwise.
    let th = if inner.abs() > F::of(15.0) {
        inner.signum()
    } else {
        let e = (inner + inner).exp();
        (e - F::one()) / (e + F::one())
    };
    let y = half * x * (F::one() + th);
    let dy = half * (F::one() + th)
        + half * x * (F::one() - th * th) * c * (F::one() + F::of(3.0) * a * x * x);
    (y, dy)
}

fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass. `None` for nodes that do not
    /// require gradients; zeros for ones the loss never reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad || !self.backward_done {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        })
    }

    /// Clears gradients so backward may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// New non-differentiable leaf holding the current value of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<(Tensor<F>, Vec<usize>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(&sa, &sb).ok_or(Error::Shape {
            op: name,
            lhs: sa,
            rhs: sb,
        })?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let mut data = vec![F::zero(); n];
        cyclic(n, da.len(), db.len(), |i, ia, ib| data[i] = f(da[ia], db[ib]));
        Ok((Tensor::new(shape.clone(), data)?, shape))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            F::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            F::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.push("scale", value, Op::Scale(a, s), &[a])
    }

    /// `a + c` for a constant scalar `c`.
    pub fn offset(&mut self, a: Var, c: F) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.push("offset", value, Op::Offset(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        self.push("square", value, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut s = F::zero();
        for &x in self.value(a).data() {
            s += x;
        }
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut s = F::zero();
        for &x in t.data() {
            s += x;
        }
        let value = Tensor::scalar(s / F::of(t.numel() as f64));
        self.push("mean", value, Op::Mean(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (mut y, mut dy) = (Vec::with_capacity(t.numel()), Vec::with_capacity(t.numel()));
        for &x in t.data() {
            let (v, d) = gelu_parts(x);
            y.push(v);
            dy.push(d);
        }
        let value = Tensor::new(t.shape().to_vec(), y)?;
        self.push("gelu", value, Op::Gelu(a, dy), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.push("silu", value, Op::Silu(a), &[a])
    }

    /// Normalizes over the last axis, then applies optional `gamma`/`beta`
    /// (each broadcast over leading axes).
    pub fn layernorm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().expect("non-empty shape");
        for p in [gamma, beta].into_iter().flatten() {
            if self.value(p).numel() != width {
                return Err(Error::Shape {
                    op: "layernorm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let data = self.value(x).data();
        let rows = data.len() / width;
        let mut xhat = Vec::with_capacity(data.len());
        let mut rstd = Vec::with_capacity(rows);
        let inv_w = F::one() / F::of(width as f64);
        for r in 0..rows {
            let row = &data[r * width..(r + 1) * width];
            let mut mean = F::zero();
            for &v in row {
                mean += v;
            }
            mean = mean * inv_w;
            let mut var = F::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            let rs = F::one() / (var * inv_w + F::of(LN_EPS)).sqrt();
            rstd.push(rs);
            xhat.extend(row.iter().map(|&v| (v - mean) * rs));
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gd = self.value(g).data();
            out.iter_mut().enumerate().for_each(|(i, o)| *o *= gd[i % width]);
        }
        if let Some(b) = beta {
            let bd = self.value(b).data();
            out.iter_mut().enumerate().for_each(|(i, o)| *o += bd[i % width]);
        }
        let value = Tensor::new(shape, out)?;
        let inputs: Vec<Var> = std::iter::once(x).chain(gamma).chain(beta).collect();
        self.push(
            "layernorm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &inputs,
        )
    }

    /// Cosine similarity of two tensors viewed as flat vectors.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(Error::Shape {
                op: "cosine_similarity",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (mut dot, mut aa, mut bb) = (F::zero(), F::zero(), F::zero());
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            dot += x * y;
            aa += x * x;
            bb += y * y;
        }
        if aa == F::zero() || bb == F::zero() {
            return Err(Error::ZeroNorm);
        }
        let (norm_a, norm_b) = (aa.sqrt(), bb.sqrt());
        let cos = (dot / (norm_a * norm_b)).max(-F::one()).min(F::one());
        self.push(
            "cosine_similarity",
            Tensor::scalar(cos),
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            },
            &[a, b],
        )
    }

    /// Softmax over the last axis. Masked (`false`) positions get exactly 0.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let width = *t.shape().last().expect("non-empty shape");
        if let Some(m) = mask {
            if m.len() != t.numel() {
                return Err(Error::Shape {
                    op: "softmax",
                    lhs: t.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let allowed = |i: usize| mask.is_none_or(|m| m[i]);
        let data = t.data();
        let mut out = vec![F::zero(); data.len()];
        for r in 0..data.len() / width {
            let base = r * width;
            let mut max = F::neg_infinity();
            for j in 0..width {
                if allowed(base + j) {
                    max = max.max(data[base + j]);
                }
            }
            if max == F::neg_infinity() {
                return Err(Error::FullyMaskedRow { row: r });
            }
            let mut total = F::zero();
            for j in 0..width {
                if allowed(base + j) {
                    let e = (data[base + j] - max).exp();
                    out[base + j] = e;
                    total += e;
                }
            }
            for o in &mut out[base..base + width] {
                *o = *o / total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// `out[i] = x[index[i]]` over flat storage, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(invalid(format!("gather index {bad} out of range {}", src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push("gather", value, Op::Gather { x, index }, &[x])
    }

    /// Selects leading-axis rows of `x` (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: Arc<[usize]>) -> Result<Var> {
        let t = self.value(x);
        let lead = t.shape()[0];
        let width = t.numel() / lead;
        if let Some(&bad) = rows.iter().find(|&&r| r >= lead) {
            return Err(invalid(format!("row {bad} out of range {lead}")));
        }
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows.iter() {
            data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(shape, data)?;
        self.push("gather_rows", value, Op::GatherRows { x, rows }, &[x])
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of nothing"))?;
        let trailing = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != trailing[..] {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(trailing);
        let value = Tensor::new(shape, data)?;
        self.push("concat", value, Op::Concat(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Rotates channel pairs `(2p, 2p+1)` of every head by the per-row angle
    /// whose cosine/sine are `cos[row, p]`, `sin[row, p]`.
    pub fn rotate_pairs(&mut self, x: Var, cos: Arc<[F]>, sin: Arc<[F]>, head_dim: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let (rows, dim) = (shape[0], t.numel() / shape[0]);
        let half = head_dim / 2;
        if head_dim % 2 != 0 || dim % head_dim != 0 || cos.len() != rows * half || sin.len() != cos.len() {
            return Err(Error::Shape {
                op: "rotate_pairs",
                lhs: shape,
                rhs: vec![cos.len(), head_dim],
            });
        }
        let src = t.data();
        let mut out = vec![F::zero(); src.len()];
        for r in 0..rows {
            for h in 0..dim / head_dim {
                let base = r * dim + h * head_dim;
                for p in 0..half {
                    let (c, s) = (cos[r * half + p], sin[r * half + p]);
                    let (x0, x1) = (src[base + 2 * p], src[base + 2 * p + 1]);
                    out[base + 2 * p] = x0 * c - x1 * s;
                    out[base + 2 * p + 1] = x0 * s + x1 * c;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "rotate_pairs",
            value,
            Op::Rotate {
                x,
                cos,
                sin,
                head_dim,
            },
            &[x],
        )
    }

    /// Multi-head scaled dot-product attention restricted to `pattern`.
    ///
    /// `q`, `k`, `v` are `[tokens, heads * head_dim]`; query row `i` reads
    /// only the key rows listed in `pattern.row(i)`.
    pub fn sparse_attention(&mut self, q: Var, k: Var, v: Var, pattern: Arc<RowPattern>, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        let (rows, dim) = (shape[0], self.value(q).numel() / shape[0]);
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::Shape {
                op: "sparse_attention",
                lhs: shape,
                rhs: self.shape(k).to_vec(),
            });
        }
        if pattern.rows() != rows || pattern.width() != rows || dim % heads != 0 {
            return Err(Error::Shape {
                op: "sparse_attention",
                lhs: shape,
                rhs: vec![pattern.rows(), pattern.width(), heads],
            });
        }
        let hd = dim / heads;
        let scale = F::one() / F::of(hd as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let nnz = pattern.nnz();
        let mut probs = vec![F::zero(); heads * nnz];
        let mut out = vec![F::zero(); rows * dim];
        for h in 0..heads {
            let p_head = &mut probs[h * nnz..(h + 1) * nnz];
            for i in 0..rows {
                let qi = &qd[i * dim + h * hd..i * dim + (h + 1) * hd];
                let (lo, hi) = (pattern.offsets[i], pattern.offsets[i + 1]);
                let cols = &pattern.cols[lo..hi];
                let scores = &mut p_head[lo..hi];
                let mut max = F::neg_infinity();
                for (s, &j) in scores.iter_mut().zip(cols) {
                    *s = dot(qi, &kd[j * dim + h * hd..j * dim + (h + 1) * hd]) * scale;
                    max = max.max(*s);
                }
                let mut total = F::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let oi = &mut out[i * dim + h * hd..i * dim + (h + 1) * hd];
                for (s, &j) in scores.iter_mut().zip(cols) {
                    *s = *s / total;
                    axpy(oi, *s, &vd[j * dim + h * hd..j * dim + (h + 1) * hd]);
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "sparse_attention",
            value,
            Op::Attention {
                q,
                k,
                v,
                pattern,
                heads,
                scale,
                probs,
            },
            &[q, k, v],
        )
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let da = acc(grads, *a, m * k);
                    F::gemm(m, n, k, F::one(), g, (n as isize, 1), val(*b), (1, n as isize), F::one(), da);
                }
                if needs(*b) {
                    let db = acc(grads, *b, k * n);
                    F::gemm(k, m, n, F::one(), val(*a), (1, k as isize), g, (n as isize, 1), F::one(), db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -F::one() } else { F::one() };
                for (v, s) in [(*a, F::one()), (*b, sign)] {
                    if needs(v) {
                        let len = val(v).len();
                        let d = acc(grads, v, len);
                        for chunk in g.chunks(len) {
                            d.iter_mut().zip(chunk).for_each(|(d, &gi)| *d += s * gi);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (da_, db_) = (val(*a), val(*b));
                let (na, nb) = (da_.len(), db_.len());
                if needs(*a) {
                    let d = acc(grads, *a, na);
                    cyclic(g.len(), na, nb, |i, ia, ib| d[ia] += g[i] * db_[ib]);
                }
                if needs(*b) {
                    let d = acc(grads, *b, nb);
                    cyclic(g.len(), na, nb, |i, ia, ib| d[ib] += g[i] * da_[ia]);
                }
            }
            Op::Scale(a, s) => {
                let d = acc(grads, *a, g.len());
                d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * *s);
            }
            Op::Offset(a) | Op::Reshape(a) => {
                let d = acc(grads, *a, g.len());
                d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
            }
            Op::Square(a) => {
                let x = val(*a);
                let d = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    d[i] += F::of(2.0) * x[i] * g[i];
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = val(*a).len();
                let gi = if matches!(node.op, Op::Mean(_)) {
                    g[0] / F::of(n as f64)
                } else {
                    g[0]
                };
                acc(grads, *a, n).iter_mut().for_each(|d| *d += gi);
            }
            Op::Gelu(a, dy) => {
                let d = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * dy[i];
                }
            }
            Op::Silu(a) => {
                let x = val(*a);
                let d = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    let s = sigmoid(x[i]);
                    d[i] += g[i] * s * (F::one() + x[i] * (F::one() - s));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let width = g.len() / rstd.len();
                let gam = gamma.map(|v| val(v));
                if needs(*x) {
                    let d = acc(grads, *x, g.len());
                    let inv_w = F::one() / F::of(width as f64);
                    let mut dxhat = vec![F::zero(); width];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let base = r * width;
                        let (mut m1, mut m2) = (F::zero(), F::zero());
                        for j in 0..width {
                            let gj = g[base + j] * gam.map_or(F::one(), |gm| gm[j]);
                            dxhat[j] = gj;
                            m1 += gj;
                            m2 += gj * xhat[base + j];
                        }
                        m1 = m1 * inv_w;
                        m2 = m2 * inv_w;
                        for j in 0..width {
                            d[base + j] += rs * (dxhat[j] - m1 - xhat[base + j] * m2);
                        }
                    }
                }
                if let Some(gv) = gamma.filter(|v| needs(*v)) {
                    let d = acc(grads, gv, width);
                    for (i, &gi) in g.iter().enumerate() {
                        d[i % width] += gi * xhat[i];
                    }
                }
                if let Some(bv) = beta.filter(|v| needs(*v)) {
                    let d = acc(grads, bv, width);
                    for (i, &gi) in g.iter().enumerate() {
                        d[i % width] += gi;
                    }
                }
            }
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            } => {
                let cos = node.value.data()[0];
                let (xa, xb) = (val(*a), val(*b));
                for (v, this, other, n_this) in [(*a, xa, xb, *norm_a), (*b, xb, xa, *norm_b)] {
                    if needs(v) {
                        let d = acc(grads, v, this.len());
                        let inv = F::one() / (*norm_a * *norm_b);
                        let self_term = cos / (n_this * n_this);
                        for i in 0..this.len() {
                            d[i] += g[0] * (other[i] * inv - this[i] * self_term);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let width = *node.value.shape().last().expect("shape");
                let d = acc(grads, *a, g.len());
                for r in 0..g.len() / width {
                    let base = r * width;
                    let mut dot = F::zero();
                    for j in 0..width {
                        dot += y[base + j] * g[base + j];
                    }
                    for j in 0..width {
                        d[base + j] += y[base + j] * (g[base + j] - dot);
                    }
                }
            }
            Op::Gather { x, index } => {
                let d = acc(grads, *x, val(*x).len());
                for (o, &src) in index.iter().enumerate() {
                    d[src] += g[o];
                }
            }
            Op::GatherRows { x, rows } => {
                let len = val(*x).len();
                let width = g.len() / rows.len();
                let d = acc(grads, *x, len);
                for (o, &r) in rows.iter().enumerate() {
                    for j in 0..width {
                        d[r * width + j] += g[o * width + j];
                    }
                }
            }
            Op::Concat(parts) => {
                let mut at = 0;
                for &p in parts {
                    let len = val(p).len();
                    if needs(p) {
                        let d = acc(grads, p, len);
                        d.iter_mut().zip(&g[at..at + len]).for_each(|(d, &gi)| *d += gi);
                    }
                    at += len;
                }
            }
            Op::Rotate {
                x,
                cos,
                sin,
                head_dim,
            } => {
                let rows = node.value.shape()[0];
                let dim = g.len() / rows;
                let half = head_dim / 2;
                let d = acc(grads, *x, g.len());
                for r in 0..rows {
                    for h in 0..dim / head_dim {
                        let base = r * dim + h * head_dim;
                        for p in 0..half {
                            let (c, s) = (cos[r * half + p], sin[r * half + p]);
                            let (g0, g1) = (g[base + 2 * p], g[base + 2 * p + 1]);
                            d[base + 2 * p] += g0 * c + g1 * s;
                            d[base + 2 * p + 1] += g1 * c - g0 * s;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                pattern,
                heads,
                scale,
                probs,
            } => self.attention_backward(g, grads, (*q, *k, *v), pattern, *heads, *scale, probs),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        (q, k, v): (Var, Var, Var),
        pattern: &RowPattern,
        heads: usize,
        scale: F,
        probs: &[F],
    ) {
        let rows = pattern.rows();
        let dim = g.len() / rows;
        let hd = dim / heads;
        let nnz = pattern.nnz();
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut dq = vec![F::zero(); g.len()];
        let mut dk = vec![F::zero(); g.len()];
        let mut dv = vec![F::zero(); g.len()];
        let mut dp = Vec::new();
        for h in 0..heads {
            let p_head = &probs[h * nnz..(h + 1) * nnz];
            for i in 0..rows {
                let (lo, hi) = (pattern.offsets[i], pattern.offsets[i + 1]);
                let cols = &pattern.cols[lo..hi];
                let p = &p_head[lo..hi];
                let gi = &g[i * dim + h * hd..i * dim + (h + 1) * hd];
                dp.clear();
                let mut weighted = F::zero();
                for (&j, &pj) in cols.iter().zip(p) {
                    let span = j * dim + h * hd..j * dim + (h + 1) * hd;
                    let d = dot(gi, &vd[span.clone()]);
                    axpy(&mut dv[span], pj, gi);
                    dp.push(d);
                    weighted += pj * d;
                }
                let qi = &qd[i * dim + h * hd..i * dim + (h + 1) * hd];
                let dqi = &mut dq[i * dim + h * hd..i * dim + (h + 1) * hd];
                for ((&j, &pj), &dpj) in cols.iter().zip(p).zip(&dp) {
                    let ds = pj * (dpj - weighted) * scale;
                    let span = j * dim + h * hd..j * dim + (h + 1) * hd;
                    axpy(dqi, ds, &kd[span.clone()]);
                    axpy(&mut dk[span], ds, qi);
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                let d = acc(grads, var, buf.len());
                d.iter_mut().zip(&buf).for_each(|(d, &b)| *d += b);
            }
        }
    }
}
