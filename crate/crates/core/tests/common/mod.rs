//! Shared oracles for the integration and acceptance targets.
#![allow(dead_code)]

use tryon_dit::model::{ModelConfig, ParamVars, SequencePlan, ToyDiTParams};
use tryon_dit::numerics::rng::{normal, stream};
use tryon_dit::numerics::{Graph, Tensor, Var};
use tryon_dit::objective::{total_loss, FlowSample, IdentityExtractor, ModelField, ObjectiveConfig};
use tryon_dit::trainer::{DataConfig, ExtractorConfig, TrainConfig};
use tryon_dit::Result;

pub type BuildFn<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Relative error with a floor on the denominator so near-zero gradients are
/// compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Central differences over every element of every input against the tape's
/// backward pass. Returns the worst relative error.
pub fn fd_max_rel_err(build: &BuildFn, inputs: &[Tensor<f64>], h: f64) -> Result<f64> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), true)).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let mut worst = 0.0f64;
    for (n, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).expect("leaf").clone();
        for i in 0..inputs[n].numel() {
            let mut plus = inputs.to_vec();
            plus[n].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[n].data_mut()[i] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

pub fn rand(seed: u64, id: u64, shape: &[usize]) -> Tensor<f64> {
    normal(&mut stream(seed, id), shape)
}

/// Weighted sum so every output element reaches the scalar.
pub fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand(seed, 99, g.shape(y)));
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Random two-reference flow sample for `cfg`, batch 2.
pub fn model_sample(cfg: &ModelConfig, seed: u64) -> Result<FlowSample<f64>> {
    let s = cfg.image_size;
    let shape = [2, cfg.channels, s, s];
    let x0 = rand(seed, 1, &shape);
    let x1 = rand(seed, 2, &shape);
    let conds = vec![rand(seed, 3, &shape), rand(seed, 4, &shape)];
    let mask = Tensor::from_f64(
        &shape,
        &(0..2 * cfg.channels * s * s).map(|i| (i % 3 != 0) as u8 as f64).collect::<Vec<_>>(),
    )?;
    let t = vec![0.35 + 0.1 * (seed % 5) as f64, 0.8];
    FlowSample::new(x0, x1, t, conds, vec![vec![1, 5, 9], vec![2, 6, 10]], mask)
}

/// Full training objective (unrolled K = 2 plus alignment) as a function of
/// the parameters.
pub fn model_loss(
    g: &mut Graph<f64>,
    cfg: &ModelConfig,
    params: &ToyDiTParams<f64>,
    sample: &FlowSample<f64>,
) -> Result<(ParamVars, Var)> {
    let plan = SequencePlan::new(cfg, 2, 3, 2)?;
    let pv = ParamVars::bind(g, params, true);
    let conditions = sample.conditions.iter().map(|c| g.constant(c.clone())).collect();
    let field = ModelField {
        config: cfg,
        params: &pv,
        plan: &plan,
        conditions,
        text_ids: sample.text_ids.concat(),
    };
    let obj = ObjectiveConfig {
        dt: 0.1,
        ..ObjectiveConfig::default()
    };
    let loss = total_loss(g, &field, sample, &obj, &IdentityExtractor)?;
    Ok((pv, loss.total))
}

/// Worst relative error of the model gradient over `per_tensor` seeded
/// elements of every parameter tensor (all elements when `None`).
pub fn model_fd(cfg: &ModelConfig, seed: u64, per_tensor: Option<usize>) -> Result<f64> {
    let params = ToyDiTParams::<f64>::init_random(cfg, seed, 0.3)?;
    let sample = model_sample(cfg, seed)?;
    let mut g = Graph::new();
    let (pv, loss) = model_loss(&mut g, cfg, &params, &sample)?;
    g.backward(loss)?;
    let eval = |p: &ToyDiTParams<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let (_, l) = model_loss(&mut g, cfg, p, &sample)?;
        Ok(g.value(l).item())
    };
    let h = 1e-5;
    let mut rng = stream(seed, 0xfd);
    let mut worst = 0.0f64;
    for (n, v) in pv.vars.iter().enumerate() {
        let grad = g.grad(*v).expect("parameter").clone();
        let numel = params.tensors()[n].numel();
        let picks: Vec<usize> = match per_tensor {
            None => (0..numel).collect(),
            Some(k) => (0..k.min(numel)).map(|_| rand::Rng::random_range(&mut rng, 0..numel)).collect(),
        };
        for i in picks {
            let mut plus = params.clone();
            plus.tensors_mut()[n].data_mut()[i] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[n].data_mut()[i] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            worst = worst.max(rel_err(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Small two-stage schedule on a 16-item dataset.
pub fn small_train_config(dim: usize, steps: (usize, usize)) -> TrainConfig {
    let mut cfg = TrainConfig {
        stages: TrainConfig::two_stage(steps.0, steps.1, 2, 2e-3),
        data: DataConfig { seed: 3, size: 16 },
        extractor: ExtractorConfig::Identity,
        ..TrainConfig::default()
    };
    cfg.model = ModelConfig {
        depth: 2,
        ..ModelConfig::with_width(dim, 2)
    };
    cfg
}
