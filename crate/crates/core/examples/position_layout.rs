//! Prints the three-axis position indices of a sequence with a text prompt,
//! a same-size reference and a half-size reference (fractional scaling).

use tryon_dit::layout::{assign_positions, Grid};

fn main() -> tryon_dit::Result<()> {
    let seq = assign_positions(Grid::new(4, 4), &[Grid::new(4, 4), Grid::new(2, 2)], 2)?;
    for seg in &seq.segments {
        println!("{:?}", seg);
        for p in &seq.positions[seg.range()] {
            let [i, w, h] = p.as_f64();
            print!(" ({i}, {w}, {h})");
        }
        println!();
    }
    Ok(())
}
