//! Windowed attention over reference tokens with condition blocking.
//!
//! Rules for query `q`, key `k`:
//! - text and noisy queries read every token;
//! - a reference query reads only keys inside its own window of its own
//!   reference image, so it never reads text or noisy keys;
//! - every token reads itself.
//!
//! Reference grids are tiled by `M×M` windows from the origin on regular
//! layers. Shifted layers move the window origins by `(⌊M/2⌋, ⌊M/2⌋)`,
//! leaving clipped windows at the borders. An axis no longer than `M` is
//! always a single window.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::layout::{Grid, RopeTables, SegmentTag, TokenSequence};
use crate::numerics::{Float, Graph, RowPattern, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Regular,
    Shifted,
}

impl Parity {
    /// Consecutive layers alternate: `R S R S …`.
    pub fn for_layer(layer: usize) -> Self {
        if layer % 2 == 0 {
            Parity::Regular
        } else {
            Parity::Shifted
        }
    }
}

/// One attention window: sequence indices of its tokens, ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub reference: usize,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub window_size: usize,
    pub parity: Parity,
    /// Windows of each reference, in reference order.
    pub windows: Vec<Vec<Window>>,
    seq_len: usize,
    ref_ranges: Vec<Range<usize>>,
}

impl WindowPlan {
    pub fn all_windows(&self) -> impl Iterator<Item = &Window> {
        self.windows.iter().flatten()
    }

    pub fn window_count(&self) -> usize {
        self.windows.iter().map(Vec::len).sum()
    }
}

/// Window intervals along one axis.
pub fn axis_intervals(extent: usize, window: usize, parity: Parity) -> Vec<Range<usize>> {
    if window >= extent {
        return vec![0..extent];
    }
    let shift = match parity {
        Parity::Regular => 0,
        Parity::Shifted => window / 2,
    };
    let mut cuts = Vec::new();
    if shift > 0 {
        cuts.push(0..shift);
    }
    let mut at = shift;
    while at < extent {
        cuts.push(at..(at + window).min(extent));
        at += window;
    }
    cuts
}

pub fn plan_windows(seq: &TokenSequence, window_size: usize, parity: Parity) -> Result<WindowPlan> {
    if window_size == 0 {
        return Err(invalid("window size must be at least 1"));
    }
    let mut windows = Vec::new();
    let mut ref_ranges = Vec::new();
    for (idx, seg) in seq.references().iter().enumerate() {
        let Grid { w, h } = seg.grid().expect("reference has a grid");
        let mut per_ref = Vec::new();
        for rows in axis_intervals(h, window_size, parity) {
            for cols in axis_intervals(w, window_size, parity) {
                let mut tokens = Vec::with_capacity(rows.len() * cols.len());
                for y in rows.clone() {
                    for x in cols.clone() {
                        tokens.push(seg.start + y * w + x);
                    }
                }
                per_ref.push(Window {
                    reference: idx + 1,
                    tokens,
                });
            }
        }
        windows.push(per_ref);
        ref_ranges.push(seg.range());
    }
    Ok(WindowPlan {
        window_size,
        parity,
        windows,
        seq_len: seq.total_len(),
        ref_ranges,
    })
}

/// Allowed (query, key) pairs, stored as per-query key lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    pattern: Arc<RowPattern>,
}

impl AttnMask {
    pub fn pattern(&self) -> &Arc<RowPattern> {
        &self.pattern
    }

    pub fn len(&self) -> usize {
        self.pattern.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.pattern.rows() == 0
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.pattern.row(q).binary_search(&k).is_ok()
    }

    /// Dense row-major boolean matrix.
    pub fn dense(&self) -> Vec<bool> {
        let n = self.len();
        let mut out = vec![false; n * n];
        for q in 0..n {
            for &k in self.pattern.row(q) {
                out[q * n + k] = true;
            }
        }
        out
    }

    pub fn allowed_pairs(&self) -> usize {
        self.pattern.nnz()
    }
}

pub fn build_mask(seq: &TokenSequence, plan: &WindowPlan) -> Result<AttnMask> {
    let refs: Vec<Range<usize>> = seq.references().iter().map(|s| s.range()).collect();
    if plan.seq_len != seq.total_len() || plan.ref_ranges != refs {
        return Err(invalid("window plan was built for a different sequence"));
    }
    let n = seq.total_len();
    let everything: Vec<usize> = (0..n).collect();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
    for q in seq.denoise_range() {
        rows[q] = everything.clone();
    }
    for window in plan.all_windows() {
        for &q in &window.tokens {
            rows[q] = window.tokens.clone();
        }
    }
    for (q, row) in rows.iter().enumerate() {
        if matches!(seq.tags[q], SegmentTag::Reference(_)) && !row.contains(&q) {
            return Err(invalid(format!("token {q} not covered by any window")));
        }
    }
    Ok(AttnMask {
        pattern: Arc::new(RowPattern::from_rows(&rows, n)?),
    })
}

/// Rotates queries and keys, then attends within the mask. Operands are
/// `[tokens, heads * head_dim]` graph nodes.
pub fn attend_graph<F: Float>(
    g: &mut Graph<F>,
    (q, k, v): (Var, Var, Var),
    pattern: &Arc<RowPattern>,
    rope: Option<&RopeTables<F>>,
    heads: usize,
) -> Result<Var> {
    let (q, k) = match rope {
        Some(t) => (
            g.rotate_pairs(q, t.cos.clone(), t.sin.clone(), t.head_dim)?,
            g.rotate_pairs(k, t.cos.clone(), t.sin.clone(), t.head_dim)?,
        ),
        None => (q, k),
    };
    g.sparse_attention(q, k, v, pattern.clone(), heads)
}

/// `[heads, L, d]` → `[L, heads * d]`.
fn heads_to_rows<F: Float>(t: &Tensor<F>) -> Result<Tensor<F>> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(invalid(format!("expected [heads, tokens, head_dim], got {s:?}")));
    }
    let (h, l, d) = (s[0], s[1], s[2]);
    let src = t.data();
    let mut out = vec![F::zero(); src.len()];
    for hi in 0..h {
        for li in 0..l {
            out[li * h * d + hi * d..li * h * d + (hi + 1) * d]
                .copy_from_slice(&src[hi * l * d + li * d..hi * l * d + (li + 1) * d]);
        }
    }
    Tensor::new(vec![l, h * d], out)
}

fn rows_to_heads<F: Float>(t: &Tensor<F>, heads: usize) -> Result<Tensor<F>> {
    let (l, hd) = (t.shape()[0], t.shape()[1]);
    let d = hd / heads;
    let src = t.data();
    let mut out = vec![F::zero(); src.len()];
    for hi in 0..heads {
        for li in 0..l {
            out[hi * l * d + li * d..hi * l * d + (li + 1) * d]
                .copy_from_slice(&src[li * hd + hi * d..li * hd + (hi + 1) * d]);
        }
    }
    Tensor::new(vec![heads, l, d], out)
}

/// Masked multi-head attention on `[heads, tokens, head_dim]` tensors.
pub fn attend<F: Float>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    mask: &AttnMask,
    rope: Option<&RopeTables<F>>,
) -> Result<Tensor<F>> {
    let heads = q.shape()[0];
    check_operands(q, k, v, mask, rope)?;
    let mut g = Graph::new();
    let qv = g.constant(heads_to_rows(q)?);
    let kv = g.constant(heads_to_rows(k)?);
    let vv = g.constant(heads_to_rows(v)?);
    let out = attend_graph(&mut g, (qv, kv, vv), mask.pattern(), rope, heads)?;
    rows_to_heads(g.value(out), heads)
}

fn check_operands<F: Float>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    mask: &AttnMask,
    rope: Option<&RopeTables<F>>,
) -> Result<()> {
    if q.shape() != k.shape() || q.shape() != v.shape() || q.shape().len() != 3 {
        return Err(invalid(format!(
            "q/k/v shapes {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if q.shape()[1] != mask.len() {
        return Err(invalid("mask does not match sequence length"));
    }
    if let Some(t) = rope {
        if t.head_dim != q.shape()[2] || t.tokens() != mask.len() {
            return Err(invalid("rope tables do not match operands"));
        }
    }
    Ok(())
}

/// Dense reference path: per head, `softmax(QKᵀ/√d, mask)·V` via matmuls.
pub fn attend_dense<F: Float>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    mask: &AttnMask,
    rope: Option<&RopeTables<F>>,
) -> Result<Tensor<F>> {
    check_operands(q, k, v, mask, rope)?;
    let (heads, l, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dense = mask.dense();
    let transpose: Arc<[usize]> = (0..d * l).map(|i| (i % l) * d + i / l).collect();
    let mut out = Vec::with_capacity(q.numel());
    for h in 0..heads {
        let mut g = Graph::new();
        let mut qh = g.constant(q.slice_leading(h)?);
        let mut kh = g.constant(k.slice_leading(h)?);
        let vh = g.constant(v.slice_leading(h)?);
        if let Some(t) = rope {
            qh = g.rotate_pairs(qh, t.cos.clone(), t.sin.clone(), d)?;
            kh = g.rotate_pairs(kh, t.cos.clone(), t.sin.clone(), d)?;
        }
        let kt = g.gather(kh, transpose.clone(), &[d, l])?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, F::one() / F::of(d as f64).sqrt())?;
        let probs = g.softmax(scores, Some(&dense))?;
        let o = g.matmul(probs, vh)?;
        out.extend_from_slice(g.value(o).data());
    }
    Tensor::new(vec![heads, l, d], out)
}

/// Multiply-add counts of one attention layer.
///
/// Each allowed (query, key) pair costs `head_dim` multiply-adds for the
/// score and `head_dim` for value aggregation, per head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub denoise_global: u64,
    pub condition_windowed: u64,
    /// Condition cost if every reference were a single window.
    pub condition_full: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.denoise_global + self.condition_windowed
    }
}

pub fn flops(seq: &TokenSequence, plan: &WindowPlan, heads: usize, head_dim: usize) -> FlopReport {
    let per_pair = 2 * (heads * head_dim) as u64;
    let l = seq.total_len() as u64;
    let denoise = seq.denoise_range().len() as u64;
    let windowed: u64 = plan.all_windows().map(|w| (w.tokens.len() as u64).pow(2)).sum();
    let full: u64 = seq.references().iter().map(|s| (s.len() as u64).pow(2)).sum();
    FlopReport {
        denoise_global: denoise * l * per_pair,
        condition_windowed: windowed * per_pair,
        condition_full: full * per_pair,
    }
}
