//! Unified token sequence `[text; noisy; ref_1; …; ref_n]` and its
//! three-axis position indices.
//!
//! Reference `i` is placed diagonally past the noisy grid and all earlier
//! references. Its token `(w, h)` sits at
//! `(i, w_noisy + Σ_{j<i} w_ref_j + w·S_w, h_noisy + Σ_{j<i} h_ref_j + h·S_h)`
//! with `S_w = w_noisy / w_ref_i` and `S_h = h_noisy / h_ref_i`, so a
//! reference of any resolution spans the same extent as the noisy image.
//! Positions stay exact rationals until rotation angles are computed.

use std::ops::Range;
use std::sync::Arc;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::Float;

pub type Rational = Ratio<i64>;

/// Extent of an image in patch units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub w: usize,
    pub h: usize,
}

impl Grid {
    pub fn new(w: usize, h: usize) -> Self {
        Self { w, h }
    }

    pub fn tokens(self) -> usize {
        self.w * self.h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SegmentKind {
    Text { tokens: usize },
    Noisy { grid: Grid },
    Reference { grid: Grid, ordinal: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub kind: SegmentKind,
    pub start: usize,
}

impl SegmentSpec {
    pub fn len(&self) -> usize {
        match self.kind {
            SegmentKind::Text { tokens } => tokens,
            SegmentKind::Noisy { grid } | SegmentKind::Reference { grid, .. } => grid.tokens(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len()
    }

    pub fn grid(&self) -> Option<Grid> {
        match self.kind {
            SegmentKind::Text { .. } => None,
            SegmentKind::Noisy { grid } | SegmentKind::Reference { grid, .. } => Some(grid),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PositionIndex {
    pub axis_i: u32,
    pub axis_w: Rational,
    pub axis_h: Rational,
}

impl PositionIndex {
    fn origin() -> Self {
        Self {
            axis_i: 0,
            axis_w: Rational::from_integer(0),
            axis_h: Rational::from_integer(0),
        }
    }

    pub fn as_f64(&self) -> [f64; 3] {
        let f = |r: Rational| *r.numer() as f64 / *r.denom() as f64;
        [self.axis_i as f64, f(self.axis_w), f(self.axis_h)]
    }
}

/// Which segment a token belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentTag {
    Text,
    Noisy,
    Reference(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub segments: Vec<SegmentSpec>,
    pub positions: Vec<PositionIndex>,
    pub tags: Vec<SegmentTag>,
}

impl TokenSequence {
    pub fn total_len(&self) -> usize {
        self.positions.len()
    }

    pub fn text(&self) -> &SegmentSpec {
        &self.segments[0]
    }

    pub fn noisy(&self) -> &SegmentSpec {
        &self.segments[1]
    }

    pub fn noisy_grid(&self) -> Grid {
        self.noisy().grid().expect("noisy segment has a grid")
    }

    pub fn references(&self) -> &[SegmentSpec] {
        &self.segments[2..]
    }

    /// Tokens of the text and noisy segments: the denoising stream.
    pub fn denoise_range(&self) -> Range<usize> {
        0..self.noisy().range().end
    }

    /// Grid coordinate `(w, h)` of a token inside its image segment.
    pub fn grid_coord(&self, token: usize) -> Option<(usize, usize)> {
        let seg = self.segments.iter().find(|s| s.range().contains(&token))?;
        let grid = seg.grid()?;
        let local = token - seg.start;
        Some((local % grid.w, local / grid.w))
    }
}

/// Builds the concatenated sequence and assigns every token its position.
pub fn assign_positions(noisy: Grid, refs: &[Grid], text_count: usize) -> Result<TokenSequence> {
    if noisy.w == 0 || noisy.h == 0 || refs.iter().any(|g| g.w == 0 || g.h == 0) {
        return Err(invalid("grid extents must be at least 1"));
    }
    let total = text_count + noisy.tokens() + refs.iter().map(|g| g.tokens()).sum::<usize>();
    let mut positions = Vec::with_capacity(total);
    let mut tags = Vec::with_capacity(total);
    let mut segments = Vec::with_capacity(2 + refs.len());

    segments.push(SegmentSpec {
        kind: SegmentKind::Text { tokens: text_count },
        start: 0,
    });
    positions.extend(std::iter::repeat_n(PositionIndex::origin(), text_count));
    tags.extend(std::iter::repeat_n(SegmentTag::Text, text_count));

    segments.push(SegmentSpec {
        kind: SegmentKind::Noisy { grid: noisy },
        start: positions.len(),
    });
    for h in 0..noisy.h {
        for w in 0..noisy.w {
            positions.push(PositionIndex {
                axis_i: 0,
                axis_w: Rational::from_integer(w as i64),
                axis_h: Rational::from_integer(h as i64),
            });
            tags.push(SegmentTag::Noisy);
        }
    }

    let (mut off_w, mut off_h) = (noisy.w as i64, noisy.h as i64);
    for (idx, grid) in refs.iter().enumerate() {
        let ordinal = idx + 1;
        segments.push(SegmentSpec {
            kind: SegmentKind::Reference { grid: *grid, ordinal },
            start: positions.len(),
        });
        let scale_w = Rational::new(noisy.w as i64, grid.w as i64);
        let scale_h = Rational::new(noisy.h as i64, grid.h as i64);
        for h in 0..grid.h {
            for w in 0..grid.w {
                positions.push(PositionIndex {
                    axis_i: ordinal as u32,
                    axis_w: Rational::from_integer(off_w) + scale_w * w as i64,
                    axis_h: Rational::from_integer(off_h) + scale_h * h as i64,
                });
                tags.push(SegmentTag::Reference(ordinal));
            }
        }
        off_w += grid.w as i64;
        off_h += grid.h as i64;
    }

    Ok(TokenSequence {
        segments,
        positions,
        tags,
    })
}

/// Channel budget of each position axis inside one attention head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisSplit {
    pub index: usize,
    pub width: usize,
    pub height: usize,
}

impl AxisSplit {
    /// Roughly `(1/8, 7/16, 7/16)` of `head_dim`, every part even. A
    /// 4-channel head has no room for the index axis and gets `(0, 2, 2)`.
    pub fn for_head_dim(head_dim: usize) -> Result<Self> {
        if head_dim < 4 || head_dim % 2 != 0 {
            return Err(invalid(format!("head_dim {head_dim} must be even and ≥ 4")));
        }
        if head_dim == 4 {
            return Ok(Self {
                index: 0,
                width: 2,
                height: 2,
            });
        }
        let mut index = (((head_dim as f64 / 8.0) / 2.0).round() as usize * 2).max(2);
        loop {
            let rest = head_dim - index;
            if rest / 2 % 2 == 0 && rest >= 4 {
                return Ok(Self {
                    index,
                    width: rest / 2,
                    height: rest / 2,
                });
            }
            index += 2;
            if index >= head_dim {
                return Err(invalid(format!("no even axis split for head_dim {head_dim}")));
            }
        }
    }

    pub fn total(&self) -> usize {
        self.index + self.width + self.height
    }

    pub fn validate(&self, head_dim: usize) -> Result<()> {
        if self.total() != head_dim {
            return Err(invalid(format!("axis split {self:?} does not sum to {head_dim}")));
        }
        if [self.index, self.width, self.height].iter().any(|d| d % 2 != 0) {
            return Err(invalid(format!("axis split {self:?} has an odd sub-dimension")));
        }
        Ok(())
    }
}

pub const ROPE_BASE: f64 = 10_000.0;

/// `θ_f = base^(−2f/d)` for `f in 0..d/2`.
pub fn frequency_ladder(d_axis: usize) -> Vec<f64> {
    (0..d_axis / 2)
        .map(|f| ROPE_BASE.powf(-((2 * f) as f64) / d_axis as f64))
        .collect()
}

/// Per-token rotation factors, laid out `[tokens, head_dim / 2]`: the index
/// axis pairs first, then width, then height.
#[derive(Clone, Debug)]
pub struct RopeTables<F> {
    pub cos: Arc<[F]>,
    pub sin: Arc<[F]>,
    pub head_dim: usize,
}

impl<F: Float> RopeTables<F> {
    pub fn tokens(&self) -> usize {
        self.cos.len() / (self.head_dim / 2)
    }

    /// Concatenate tables of several sequences in order.
    pub fn concat(parts: &[&RopeTables<F>]) -> Self {
        let head_dim = parts.first().map_or(0, |p| p.head_dim);
        let cos: Vec<F> = parts.iter().flat_map(|p| p.cos.iter().copied()).collect();
        let sin: Vec<F> = parts.iter().flat_map(|p| p.sin.iter().copied()).collect();
        Self {
            cos: cos.into(),
            sin: sin.into(),
            head_dim,
        }
    }
}

pub fn rope_angles(position: &PositionIndex, split: AxisSplit) -> Vec<f64> {
    let p = position.as_f64();
    let mut angles = Vec::with_capacity(split.total() / 2);
    for (axis, d) in [split.index, split.width, split.height].into_iter().enumerate() {
        angles.extend(frequency_ladder(d).into_iter().map(|theta| p[axis] * theta));
    }
    angles
}

pub fn rope_tables<F: Float>(seq: &TokenSequence, head_dim: usize, split: AxisSplit) -> Result<RopeTables<F>> {
    split.validate(head_dim)?;
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(seq.total_len() * half);
    let mut sin = Vec::with_capacity(seq.total_len() * half);
    for pos in &seq.positions {
        for a in rope_angles(pos, split) {
            cos.push(F::of(a.cos()));
            sin.push(F::of(a.sin()));
        }
    }
    Ok(RopeTables {
        cos: cos.into(),
        sin: sin.into(),
        head_dim,
    })
}
