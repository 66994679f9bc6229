//! Wall-clock comparison of windowed against single-window reference
//! attention, alongside the analytic multiply-add counts.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{attend, build_mask, flops, plan_windows, AttnMask, Parity};
use crate::error::{invalid, Result};
use crate::layout::{assign_positions, Grid, TokenSequence};
use crate::numerics::rng::{normal, stream};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttnBenchConfig {
    pub ref_tokens: Vec<usize>,
    pub window: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Side of the square noisy grid.
    pub noisy_side: usize,
    pub text_tokens: usize,
    /// Timing is the minimum over this many runs.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for AttnBenchConfig {
    fn default() -> Self {
        Self {
            ref_tokens: vec![256, 1024, 4096],
            window: 16,
            heads: 1,
            head_dim: 16,
            noisy_side: 8,
            text_tokens: 0,
            repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnBenchRow {
    pub ref_tokens: usize,
    #[serde(rename = "M")]
    pub window: usize,
    pub flops_windowed: u64,
    pub flops_full: u64,
    pub time_windowed_ns: u128,
    pub time_full_ns: u128,
}

/// Most nearly square `w × h` grid with `w·h = n`, `w ≥ h`.
pub fn grid_for(n: usize) -> Result<Grid> {
    if n == 0 {
        return Err(invalid("reference token count must be positive"));
    }
    let h = (1..=n.isqrt()).rev().find(|h| n % h == 0).expect("1 divides n");
    Ok(Grid::new(n / h, h))
}

fn sequence(cfg: &AttnBenchConfig, n: usize) -> Result<TokenSequence> {
    let side = cfg.noisy_side;
    assign_positions(Grid::new(side, side), &[grid_for(n)?], cfg.text_tokens)
}

fn time_attend(q: &Tensor<f32>, k: &Tensor<f32>, v: &Tensor<f32>, mask: &AttnMask, repeats: usize) -> Result<u128> {
    let mut best = u128::MAX;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let out = attend(q, k, v, mask, None)?;
        best = best.min(start.elapsed().as_nanos());
        std::hint::black_box(out);
    }
    Ok(best)
}

/// Times one regular-parity attention layer per reference size.
pub fn bench_attention(cfg: &AttnBenchConfig) -> Result<Vec<AttnBenchRow>> {
    if cfg.window == 0 || cfg.heads == 0 || cfg.head_dim == 0 {
        return Err(invalid("window, heads and head_dim must be positive"));
    }
    let mut rows = Vec::new();
    for &n in &cfg.ref_tokens {
        let seq = sequence(cfg, n)?;
        let windowed = plan_windows(&seq, cfg.window, Parity::Regular)?;
        let extent = seq.references()[0].grid().map_or(1, |g| g.w.max(g.h));
        let full = plan_windows(&seq, extent, Parity::Regular)?;
        let fw = flops(&seq, &windowed, cfg.heads, cfg.head_dim);
        let l = seq.total_len();
        let shape = [cfg.heads, l, cfg.head_dim];
        let mut rng = stream(cfg.seed, n as u64);
        let (q, k, v) = (normal(&mut rng, &shape), normal(&mut rng, &shape), normal(&mut rng, &shape));
        let tw = time_attend(&q, &k, &v, &build_mask(&seq, &windowed)?, cfg.repeats)?;
        let tf = time_attend(&q, &k, &v, &build_mask(&seq, &full)?, cfg.repeats)?;
        rows.push(AttnBenchRow {
            ref_tokens: n,
            window: cfg.window,
            flops_windowed: fw.condition_windowed,
            flops_full: fw.condition_full,
            time_windowed_ns: tw,
            time_full_ns: tf,
        });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[AttnBenchRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
}
