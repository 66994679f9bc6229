use std::sync::Arc;

use super::rng::{normal, stream};
use super::*;
use crate::error::{Error, Result};

type BuildFn = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Central finite differences against the recorded backward pass.
/// Returns the max relative error over every input element.
fn fd_max_rel_err(build: &BuildFn, inputs: &[Tensor<f64>], h: f64) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), true)).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = build(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (n, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap();
        for i in 0..inputs[n].numel() {
            let mut plus = inputs.to_vec();
            plus[n].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[n].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

fn rand(seed: u64, id: u64, shape: &[usize]) -> Tensor<f64> {
    normal(&mut stream(seed, id), shape)
}

/// Weighted sum so every output element affects the scalar loss.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand(seed, 99, g.shape(y)));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check_op(name: &str, shapes: &[&[usize]], op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Copy + 'static) {
    for seed in 0..100 {
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| rand(seed, i as u64, s))
            .collect();
        let build = move |g: &mut Graph<f64>, v: &[Var]| {
            let y = op(g, v)?;
            probe(g, y, seed)
        };
        let err = fd_max_rel_err(&build, &inputs, 1e-5);
        assert!(err < 1e-5, "{name} seed {seed}: rel err {err}");
    }
}

#[test]
fn matmul_identity_and_inner_product() {
    let mut g = Graph::<f64>::new();
    let i = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = g.constant(Tensor::from_f64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]).unwrap());
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    let r = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
    let col = g.constant(Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap());
    let d = g.matmul(r, col).unwrap();
    assert_eq!(g.value(d).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let inputs = vec![rand(3, 0, &[5, 7]), rand(3, 1, &[7, 3])];
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let c = g.matmul(v[0], v[1])?;
        probe(g, c, 3)
    };
    assert!(fd_max_rel_err(&build, &inputs, 1e-5) < 1e-6);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[3]));
    let y = g.softmax(x, None).unwrap();
    for &p in g.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::from_f64(&[3], &[10.0, f64::NEG_INFINITY, 10.0]).unwrap());
    let y = g.softmax(x, Some(&[true, false, true])).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.0, 0.5]);
    let x = g.constant(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
    let y = g.softmax(x, None).unwrap();
    let expect = [0.09003, 0.24473, 0.66524];
    for (p, e) in g.value(y).data().iter().zip(expect) {
        assert!((p - e).abs() < 1e-4);
    }
}

#[test]
fn softmax_fully_masked_row_names_row() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 2]));
    let err = g.softmax(x, Some(&[true, false, false, false])).unwrap_err();
    assert!(matches!(err, Error::FullyMaskedRow { row: 1 }));
}

#[test]
fn softmax_rows_sum_to_one_with_mask() {
    for seed in 0..50 {
        let x = rand(seed, 0, &[4, 9]);
        let mask: Vec<bool> = (0..36).map(|i| i % 9 == 0 || (i * 7 + seed as usize) % 3 != 0).collect();
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let y = g.softmax(xv, Some(&mask)).unwrap();
        let d = g.value(y).data();
        for r in 0..4 {
            let s: f64 = d[r * 9..(r + 1) * 9].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                assert_eq!(d[i], 0.0);
            }
        }
    }
}

#[test]
fn cosine_similarity_examples() {
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::from_f64(&[3], &[0.3, -2.0, 5.0]).unwrap());
    let c = g.cosine_similarity(v, v).unwrap();
    assert!((g.value(c).item() - 1.0).abs() < 1e-15);
    let a = g.constant(Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap());
    let b = g.constant(Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap());
    let c = g.cosine_similarity(a, b).unwrap();
    assert_eq!(g.value(c).item(), 0.0);
    let z = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(g.cosine_similarity(a, z), Err(Error::ZeroNorm)));
}

#[test]
fn mean_square_gradient_by_hand() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
    let sq = g.square(x).unwrap();
    let m = g.mean(sq).unwrap();
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn backward_rules() {
    let mut g = Graph::<f64>::new();
    let w = g.leaf(Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap(), true);
    let x = g.constant(Tensor::from_f64(&[3], &[4.0, 5.0, 6.0]).unwrap());
    let p = g.mul(w, x).unwrap();
    let loss = g.sum(p).unwrap();
    let unused = g.leaf(Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap(), true);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[4.0, 5.0, 6.0]);
    assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0]);
    assert!(g.grad(x).is_none());
    assert!(matches!(g.backward(loss), Err(Error::BackwardTwice)));
    g.reset();
    g.backward(loss).unwrap();
    assert!(matches!(g.backward(p), Err(Error::BackwardTwice)));
    g.reset();
    assert!(matches!(g.backward(p), Err(Error::NonScalarLoss(_))));
}

#[test]
fn detached_leaf_gets_zero_grad() {
    let mut g = Graph::<f64>::new();
    let w = g.leaf(Tensor::from_f64(&[2], &[1.0, 3.0]).unwrap(), true);
    let d = g.detach(w);
    let sq = g.square(d).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[1], &[1e200]).unwrap());
    assert!(matches!(g.square(x), Err(Error::NonFinite { op: "square" })));
}

#[test]
fn broadcasting_is_leading_only() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[4, 3]));
    let row = g.constant(Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap());
    let s = g.add(a, row).unwrap();
    assert_eq!(g.shape(s), &[4, 3]);
    assert_eq!(&g.value(s).data()[9..], &[1.0, 2.0, 3.0]);
    let col = g.constant(Tensor::zeros(&[4, 1]));
    assert!(g.add(a, col).is_err());
}

#[test]
fn two_layer_mlp_gradients() {
    for seed in 0..100 {
        let inputs = vec![
            rand(seed, 0, &[4, 5]),
            rand(seed, 1, &[5, 6]),
            rand(seed, 2, &[1, 6]),
            rand(seed, 3, &[6, 2]),
        ];
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add(h, v[2])?;
            let h = g.gelu(h)?;
            let o = g.matmul(h, v[3])?;
            let sq = g.square(o)?;
            g.mean(sq)
        };
        let err = fd_max_rel_err(&build, &inputs, 1e-5);
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn elementwise_ops_gradients() {
    check_op("add", &[&[3, 4], &[1, 4]], |g, v| g.add(v[0], v[1]));
    check_op("sub", &[&[4], &[2, 4]], |g, v| g.sub(v[0], v[1]));
    check_op("mul", &[&[3, 4], &[4]], |g, v| g.mul(v[0], v[1]));
    check_op("scale", &[&[5]], |g, v| g.scale(v[0], -1.7));
    check_op("offset", &[&[5]], |g, v| g.offset(v[0], 0.3));
    check_op("square", &[&[2, 3]], |g, v| g.square(v[0]));
    check_op("sum", &[&[2, 3]], |g, v| g.sum(v[0]));
    check_op("mean", &[&[2, 3]], |g, v| g.mean(v[0]));
    check_op("gelu", &[&[7]], |g, v| g.gelu(v[0]));
    check_op("silu", &[&[7]], |g, v| g.silu(v[0]));
    check_op("reshape", &[&[2, 3]], |g, v| g.reshape(v[0], &[3, 2]));
}

#[test]
fn structural_ops_gradients() {
    check_op("layernorm", &[&[3, 6]], |g, v| g.layernorm(v[0], None, None));
    check_op("layernorm_affine", &[&[3, 6], &[6], &[1, 6]], |g, v| {
        g.layernorm(v[0], Some(v[1]), Some(v[2]))
    });
    check_op("cosine", &[&[6], &[2, 3]], |g, v| g.cosine_similarity(v[0], v[1]));
    check_op("softmax", &[&[3, 5]], |g, v| g.softmax(v[0], None));
    check_op("softmax_masked", &[&[2, 3]], |g, v| {
        g.softmax(v[0], Some(&[true, false, true, true, true, false]))
    });
    check_op("gather", &[&[2, 3]], |g, v| {
        g.gather(v[0], Arc::from(vec![5usize, 0, 0, 3]), &[2, 2])
    });
    check_op("gather_rows", &[&[3, 2]], |g, v| g.gather_rows(v[0], Arc::from(vec![2usize, 2, 0])));
    check_op("concat", &[&[1, 3], &[2, 3]], |g, v| g.concat(&[v[0], v[1], v[0]]));
}

#[test]
fn rotation_and_attention_gradients() {
    check_op("rotate_pairs", &[&[3, 8]], |g, v| {
        let angles: Vec<f64> = (0..6).map(|i| 0.37 * i as f64).collect();
        let cos: Arc<[f64]> = angles.iter().map(|a| a.cos()).collect();
        let sin: Arc<[f64]> = angles.iter().map(|a| a.sin()).collect();
        g.rotate_pairs(v[0], cos, sin, 4)
    });
    check_op("sparse_attention", &[&[4, 6], &[4, 6], &[4, 6]], |g, v| {
        let rows = vec![vec![0, 1, 2, 3], vec![1], vec![0, 2, 3], vec![2, 3]];
        let pattern = Arc::new(RowPattern::from_rows(&rows, 4)?);
        g.sparse_attention(v[0], v[1], v[2], pattern, 2)
    });
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut g = Graph::<f64>::new();
        let a = g.constant(rand(5, 0, &[6, 8]));
        let b = g.constant(rand(5, 1, &[8, 8]));
        let c = g.matmul(a, b).unwrap();
        let p = Arc::new(RowPattern::dense(6, 6));
        let o = g.sparse_attention(c, c, c, p, 2).unwrap();
        let n = g.layernorm(o, None, None).unwrap();
        g.value(n).clone()
    };
    assert_eq!(run(), run());
}
