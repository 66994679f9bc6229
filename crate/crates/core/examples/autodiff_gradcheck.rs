//! Records a small two-layer network on the tape, runs the backward pass and
//! compares one weight gradient against central finite differences.

use tryon_dit::numerics::rng::{normal, stream};
use tryon_dit::numerics::{Graph, Tensor};

fn loss(w1: &Tensor<f64>, w2: &Tensor<f64>, x: &Tensor<f64>) -> tryon_dit::Result<(f64, Tensor<f64>)> {
    let mut g = Graph::new();
    let (xv, a, b) = (g.constant(x.clone()), g.leaf(w1.clone(), true), g.leaf(w2.clone(), true));
    let h = g.matmul(xv, a)?;
    let h = g.gelu(h)?;
    let h = g.layernorm(h, None, None)?;
    let y = g.matmul(h, b)?;
    let y = g.square(y)?;
    let l = g.mean(y)?;
    g.backward(l)?;
    Ok((g.value(l).item(), g.grad(a).expect("leaf").clone()))
}

fn main() -> tryon_dit::Result<()> {
    let mut rng = stream(7, 0);
    let x: Tensor<f64> = normal(&mut rng, &[4, 6]);
    let w1: Tensor<f64> = normal(&mut rng, &[6, 8]);
    let w2: Tensor<f64> = normal(&mut rng, &[8, 3]);
    let (value, grad) = loss(&w1, &w2, &x)?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..w1.numel() {
        let (mut p, mut m) = (w1.clone(), w1.clone());
        p.data_mut()[i] += h;
        m.data_mut()[i] -= h;
        let fd = (loss(&p, &w2, &x)?.0 - loss(&m, &w2, &x)?.0) / (2.0 * h);
        let a = grad.data()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
    }
    println!("loss {value:.6}, max relative gradient error {worst:.2e}");
    Ok(())
}
