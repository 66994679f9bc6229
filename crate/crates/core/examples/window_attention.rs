//! Plans regular and shifted windows over a reference segment, builds the
//! attention mask and checks the sparse kernel against dense attention.

use tryon_dit::attention::{attend, attend_dense, build_mask, flops, plan_windows, Parity};
use tryon_dit::layout::{assign_positions, Grid};
use tryon_dit::numerics::rng::{normal, stream};
use tryon_dit::numerics::Tensor;

fn main() -> tryon_dit::Result<()> {
    let seq = assign_positions(Grid::new(4, 4), &[Grid::new(8, 8)], 3)?;
    let mut rng = stream(1, 0);
    let shape = [2, seq.total_len(), 8];
    let (q, k, v): (Tensor<f64>, Tensor<f64>, Tensor<f64>) =
        (normal(&mut rng, &shape), normal(&mut rng, &shape), normal(&mut rng, &shape));
    for parity in [Parity::Regular, Parity::Shifted] {
        let plan = plan_windows(&seq, 4, parity)?;
        let mask = build_mask(&seq, &plan)?;
        let sparse = attend(&q, &k, &v, &mask, None)?;
        let dense = attend_dense(&q, &k, &v, &mask, None)?;
        let f = flops(&seq, &plan, 2, 8);
        println!(
            "{parity:?}: {} windows, {} allowed pairs, condition flops {} (full {}), sparse vs dense {:.1e}",
            plan.window_count(),
            mask.allowed_pairs(),
            f.condition_windowed,
            f.condition_full,
            sparse.max_abs_diff(&dense)
        );
    }
    Ok(())
}
