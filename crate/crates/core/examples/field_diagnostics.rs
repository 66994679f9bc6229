//! Lipschitz estimation on a linear field with a known constant, and Euler
//! error scaling on `dx/dt = x^2`, which has a closed-form solution.

use tryon_dit::analysis::{error_vs_dt, field_trajectories, trajectory_estimate, ErrorReference};
use tryon_dit::numerics::Tensor;
use tryon_dit::sampler::FnField;

fn main() -> tryon_dit::Result<()> {
    let a = 0.7;
    let linear = FnField(move |x: &Tensor<f64>, _t: f64| x.map(|v| a * v));
    let x1 = Tensor::from_f64(&[4, 8], &(0..32).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>())?;
    let traj = field_trajectories(&linear, &x1, 50)?;
    let est = trajectory_estimate(&traj, 10_000, 0)?;
    println!("linear field a = {a}: L_hat = {:.4}, median ratio {:.4}", est.l_hat, est.median);

    // Integrating t: 1 -> 0 with x' = x^2 gives x(0) = x1 / (1 + x1).
    let square = FnField(|x: &Tensor<f64>, _t: f64| x.map(|v| v * v));
    let x1 = Tensor::from_f64(&[1, 3], &[0.2, 0.5, -0.3])?;
    let exact = x1.map(|v| v / (1.0 + v));
    let dts = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0];
    let curve = error_vs_dt(&square, &x1, &dts, ErrorReference::Exact(exact))?;
    for p in &curve.points {
        println!("dt 1/{:<4} error {:.3e}", p.steps, p.error);
    }
    println!("log-log slope {:?}", curve.slope);
    Ok(())
}
