//! Times windowed against single-window reference attention and prints the
//! rows as CSV.

use tryon_dit::bench::{bench_attention, to_csv, AttnBenchConfig};

fn main() -> tryon_dit::Result<()> {
    let cfg = AttnBenchConfig {
        ref_tokens: vec![256, 1024, 4096],
        repeats: 2,
        ..AttnBenchConfig::default()
    };
    print!("{}", to_csv(&bench_attention(&cfg)?)?);
    Ok(())
}
