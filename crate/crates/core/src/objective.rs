//! Flow-matching losses: single-step regression, the unrolled multi-step
//! variant, masked feature alignment and their weighted sum.
//!
//! Time runs from data (`t = 0`) to noise (`t = 1`); the target velocity of a
//! pair is `u = x1 - x0`.

use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{forward_graph, ModelConfig, ParamVars, SequencePlan};
use crate::numerics::rng::{normal, stream, Stream};
use crate::numerics::{Float, Graph, Tensor, Var};

pub const DEFAULT_DT: f64 = 0.03;
pub const DEFAULT_LAMBDA: f64 = 0.10;

/// `(1 - t)·x0 + t·x1`.
pub fn interpolate<F: Float>(x0: &Tensor<F>, x1: &Tensor<F>, t: f64) -> Result<Tensor<F>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("t = {t} outside [0, 1]")));
    }
    let (a, b) = (F::of(1.0 - t), F::of(t));
    x0.zip_map(x1, |p, q| a * p + b * q)
}

/// A batch of training pairs. Images are `[B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct FlowSample<F: Float> {
    pub x0: Tensor<F>,
    pub x1: Tensor<F>,
    pub t: Vec<f64>,
    pub x_t: Tensor<F>,
    pub u: Tensor<F>,
    pub conditions: Vec<Tensor<F>>,
    pub text_ids: Vec<Vec<usize>>,
    /// 0/1 weights marking the garment region, same shape as `x0`.
    pub mask: Tensor<F>,
}

impl<F: Float> FlowSample<F> {
    /// Builds `x_t` and `u` from data, noise and per-sample times.
    pub fn new(
        x0: Tensor<F>,
        x1: Tensor<F>,
        t: Vec<f64>,
        conditions: Vec<Tensor<F>>,
        text_ids: Vec<Vec<usize>>,
        mask: Tensor<F>,
    ) -> Result<Self> {
        let b = x0.shape()[0];
        if x0.shape() != x1.shape() || mask.shape() != x0.shape() || t.len() != b || text_ids.len() != b {
            return Err(invalid("flow sample parts disagree in shape or batch size"));
        }
        let per = x0.numel() / b;
        let mut x_t = Vec::with_capacity(x0.numel());
        for (i, (&p, &q)) in x0.data().iter().zip(x1.data()).enumerate() {
            let ti = t[i / per];
            if !(0.0..=1.0).contains(&ti) {
                return Err(invalid(format!("t = {ti} outside [0, 1]")));
            }
            x_t.push(F::of(1.0 - ti) * p + F::of(ti) * q);
        }
        let x_t = Tensor::new(x0.shape().to_vec(), x_t)?;
        let u = x1.zip_map(&x0, |q, p| q - p)?;
        Ok(Self {
            x0,
            x1,
            t,
            x_t,
            u,
            conditions,
            text_ids,
            mask,
        })
    }

    pub fn batch(&self) -> usize {
        self.t.len()
    }

    /// Per-sample `t` broadcast to the image shape.
    pub fn time_tensor(&self, shift: f64) -> Tensor<F> {
        let per = self.x0.numel() / self.batch();
        let data = (0..self.x0.numel()).map(|i| F::of(self.t[i / per] - shift)).collect();
        Tensor::new(self.x0.shape().to_vec(), data).expect("time tensor shape")
    }
}

/// Draws `t ~ U[(K-1)·dt, 1]` so every unrolled time stays in `[0, 1]`.
pub fn sample_time(rng: &mut Stream, k: usize, dt: f64) -> Result<f64> {
    let lo = (k.saturating_sub(1)) as f64 * dt;
    if lo > 1.0 {
        return Err(invalid(format!("K = {k} steps of {dt} do not fit in [0, 1]")));
    }
    Ok(crate::numerics::rng::uniform(rng, lo, 1.0))
}

/// Unit-Gaussian noise image of `shape`.
pub fn draw_noise<F: Float>(seed: u64, id: u64, shape: &[usize]) -> Tensor<F> {
    normal(&mut stream(seed, id), shape)
}

/// Velocity network on the tape: `v(x, t)` for a batch state node `x`.
pub trait GraphField<F: Float> {
    fn velocity(&self, g: &mut Graph<F>, x: Var, t: &[f64]) -> Result<Var>;
}

/// The toy network with its conditions bound.
pub struct ModelField<'a, F: Float> {
    pub config: &'a ModelConfig,
    pub params: &'a ParamVars,
    pub plan: &'a SequencePlan<F>,
    pub conditions: Vec<Var>,
    pub text_ids: Vec<usize>,
}

impl<F: Float> GraphField<F> for ModelField<'_, F> {
    fn velocity(&self, g: &mut Graph<F>, x: Var, t: &[f64]) -> Result<Var> {
        let f = forward_graph(g, self.config, self.params, self.plan, x, t, &self.conditions, &self.text_ids)?;
        Ok(f.output)
    }
}

/// Returns the true target velocity regardless of state.
pub struct OracleField<F: Float> {
    pub u: Tensor<F>,
}

impl<F: Float> GraphField<F> for OracleField<F> {
    fn velocity(&self, g: &mut Graph<F>, _x: Var, _t: &[f64]) -> Result<Var> {
        Ok(g.constant(self.u.clone()))
    }
}

/// `v(x, t) = a·x` with a learnable scalar `a`.
pub struct LinearField {
    pub a: Var,
}

impl<F: Float> GraphField<F> for LinearField {
    fn velocity(&self, g: &mut Graph<F>, x: Var, _t: &[f64]) -> Result<Var> {
        g.mul(self.a, x)
    }
}

/// Mean squared error against `u`.
fn mse_to<F: Float>(g: &mut Graph<F>, v: Var, u: Var) -> Result<Var> {
    let d = g.sub(v, u)?;
    let s = g.square(d)?;
    g.mean(s)
}

pub fn ssp_loss<F: Float>(g: &mut Graph<F>, field: &dyn GraphField<F>, sample: &FlowSample<F>) -> Result<Var> {
    let x = g.constant(sample.x_t.clone());
    let u = g.constant(sample.u.clone());
    let v = field.velocity(g, x, &sample.t)?;
    mse_to(g, v, u)
}

/// Unrolled chain of the multi-step objective.
pub struct MtpChain {
    pub loss: Var,
    pub terms: Vec<Var>,
    pub states: Vec<Var>,
    pub velocities: Vec<Var>,
}

/// Average of `K` squared errors along a chain of Euler steps of size `-dt`
/// driven by the field's own predictions. With `detach` the states feed
/// forward without carrying gradient.
pub fn mtp_loss<F: Float>(
    g: &mut Graph<F>,
    field: &dyn GraphField<F>,
    sample: &FlowSample<F>,
    k: usize,
    dt: f64,
    detach: bool,
) -> Result<MtpChain> {
    if k == 0 {
        return Err(invalid("K must be at least 1"));
    }
    if let Some(&t) = sample.t.iter().find(|&&t| t - (k - 1) as f64 * dt < 0.0) {
        return Err(invalid(format!("t = {t} underflows with K = {k}, dt = {dt}")));
    }
    let u = g.constant(sample.u.clone());
    let mut x = g.constant(sample.x_t.clone());
    let (mut terms, mut states, mut velocities) = (Vec::new(), vec![x], Vec::new());
    for step in 0..k {
        let t: Vec<f64> = sample.t.iter().map(|&t| t - step as f64 * dt).collect();
        let v = field.velocity(g, x, &t)?;
        terms.push(mse_to(g, v, u)?);
        velocities.push(v);
        if step + 1 < k {
            let v = if detach { g.detach(v) } else { v };
            let dx = g.scale(v, F::of(-dt))?;
            let next = g.add(x, dx)?;
            x = if detach { g.detach(next) } else { next };
            states.push(x);
        }
    }
    let loss = if k == 1 {
        terms[0]
    } else {
        let parts = g.concat(&terms)?;
        g.mean(parts)?
    };
    Ok(MtpChain {
        loss,
        terms,
        states,
        velocities,
    })
}

/// Frozen map from flattened masked pixels `[B, n]` to features `[B, m]`.
pub trait FeatureExtractor<F: Float>: Send + Sync {
    fn features(&self, g: &mut Graph<F>, x: Var) -> Result<Var>;
}

pub struct IdentityExtractor;

impl<F: Float> FeatureExtractor<F> for IdentityExtractor {
    fn features(&self, _g: &mut Graph<F>, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// Seeded matrix with orthonormal columns, `[n, m]` with `m ≤ n`.
pub struct OrthogonalExtractor<F: Float> {
    pub matrix: Tensor<F>,
}

impl<F: Float> OrthogonalExtractor<F> {
    pub fn new(n: usize, m: usize, seed: u64) -> Result<Self> {
        if m == 0 || m > n {
            return Err(invalid(format!("need 1 ≤ m ≤ n, got m = {m}, n = {n}")));
        }
        let mut rng = stream(seed, 0x6f72_7468);
        // Modified Gram-Schmidt on m Gaussian columns, in f64.
        let raw: Tensor<f64> = normal(&mut rng, &[m, n]);
        let mut cols: Vec<Vec<f64>> = raw.data().chunks(n).map(<[f64]>::to_vec).collect();
        for i in 0..m {
            for j in 0..i {
                let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = cols.split_at_mut(i);
                tail[0].iter_mut().zip(&head[j]).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = cols[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            cols[i].iter_mut().for_each(|a| *a /= norm);
        }
        let mut data = vec![F::zero(); n * m];
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                data[i * m + j] = F::of(v);
            }
        }
        Ok(Self {
            matrix: Tensor::new(vec![n, m], data)?,
        })
    }
}

impl<F: Float> FeatureExtractor<F> for OrthogonalExtractor<F> {
    fn features(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let q = g.constant(self.matrix.clone());
        g.matmul(x, q)
    }
}

/// `1 - cos(E(M ⊙ gt), E(M ⊙ gen))`, averaged over samples of the batch.
/// Samples with an empty mask or zero-norm features contribute 0; a batch
/// where every sample does yields `None`.
pub fn align_loss<F: Float>(
    g: &mut Graph<F>,
    generated: Var,
    ground_truth: Var,
    mask: &Tensor<F>,
    extractor: &dyn FeatureExtractor<F>,
) -> Result<Option<Var>> {
    let shape = g.shape(generated).to_vec();
    if shape != g.shape(ground_truth) || shape != mask.shape() {
        return Err(invalid("align_loss operands disagree in shape"));
    }
    let b = shape[0];
    let n = mask.numel() / b;
    let live: Vec<usize> = (0..b)
        .filter(|&i| mask.data()[i * n..(i + 1) * n].iter().any(|&m| m != F::zero()))
        .collect();
    if live.is_empty() {
        warn!("alignment mask selects no pixels; alignment term set to 0");
        return Ok(None);
    }
    let m = g.constant(mask.clone());
    let flat = |g: &mut Graph<F>, x: Var| -> Result<Var> {
        let masked = g.mul(x, m)?;
        g.reshape(masked, &[b, n])
    };
    let (gen, gt) = (flat(g, generated)?, flat(g, ground_truth)?);
    let (fg, ft) = (extractor.features(g, gen)?, extractor.features(g, gt)?);
    let width = g.value(fg).numel() / b;
    let mut dists = Vec::with_capacity(live.len());
    for &i in &live {
        let row: Arc<[usize]> = (i * width..(i + 1) * width).collect();
        let a = g.gather(ft, row.clone(), &[width])?;
        let c = g.gather(fg, row, &[width])?;
        // Zero features (e.g. a black garment region) have no direction.
        if g.value(a).norm() == 0.0 || g.value(c).norm() == 0.0 {
            continue;
        }
        let cos = g.cosine_similarity(a, c)?;
        let d = g.scale(cos, -F::one())?;
        dists.push(g.offset(d, F::one())?);
    }
    if dists.is_empty() {
        return Ok(None);
    }
    let all = g.concat(&dists)?;
    let total = g.sum(all)?;
    Ok(Some(g.scale(total, F::one() / F::of(b as f64))?))
}

/// Plain numbers of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ssp: f64,
    pub l_mtp: f64,
    pub terms: Vec<f64>,
    pub l_align: f64,
    pub total: f64,
    pub lambda: f64,
}

pub struct LossGraph {
    pub total: Var,
    pub chain: MtpChain,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub k: usize,
    pub dt: f64,
    pub lambda: f64,
    pub mtp_detach: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            k: 2,
            dt: DEFAULT_DT,
            lambda: DEFAULT_LAMBDA,
            mtp_detach: false,
        }
    }
}

/// `l_mtp + λ·l_align`, with the alignment term evaluated on the one-step
/// data estimate `x̂0 = x_t - t·v(x_t, t)`.
pub fn total_loss<F: Float>(
    g: &mut Graph<F>,
    field: &dyn GraphField<F>,
    sample: &FlowSample<F>,
    cfg: &ObjectiveConfig,
    extractor: &dyn FeatureExtractor<F>,
) -> Result<LossGraph> {
    if cfg.lambda < 0.0 || !cfg.lambda.is_finite() {
        return Err(invalid(format!("lambda must be ≥ 0, got {}", cfg.lambda)));
    }
    let chain = mtp_loss(g, field, sample, cfg.k, cfg.dt, cfg.mtp_detach)?;
    let align = if cfg.lambda > 0.0 {
        let tt = g.constant(sample.time_tensor(0.0));
        let step = g.mul(tt, chain.velocities[0])?;
        let x0_hat = g.sub(chain.states[0], step)?;
        let gt = g.constant(sample.x0.clone());
        align_loss(g, x0_hat, gt, &sample.mask, extractor)?
    } else {
        None
    };
    let total = match align {
        Some(a) => {
            let w = g.scale(a, F::of(cfg.lambda))?;
            g.add(chain.loss, w)?
        }
        None => chain.loss,
    };
    let item = |v: Var| g.value(v).item().as_f64();
    let breakdown = LossBreakdown {
        l_ssp: item(chain.terms[0]),
        l_mtp: item(chain.loss),
        terms: chain.terms.iter().map(|&v| item(v)).collect(),
        l_align: align.map_or(0.0, item),
        total: item(total),
        lambda: cfg.lambda,
    };
    Ok(LossGraph {
        total,
        chain,
        breakdown,
    })
}

/// Adjacent-velocity check along one chain: returns, for every `k`, the
/// squared velocity change and its bound `2‖v_{k+1} - u‖² + 2‖v_k - u‖²`.
pub fn smoothness_bounds<F: Float>(velocities: &[Tensor<F>], u: &Tensor<F>) -> Vec<(f64, f64)> {
    let sq = |a: &Tensor<F>, b: &Tensor<F>| -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum()
    };
    velocities
        .windows(2)
        .map(|w| (sq(&w[1], &w[0]), 2.0 * sq(&w[1], u) + 2.0 * sq(&w[0], u)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seed: u64, t: f64) -> FlowSample<f64> {
        let shape = [1, 2, 2, 2];
        let x0 = draw_noise(seed, 1, &shape);
        let x1 = draw_noise(seed, 2, &shape);
        let mask = Tensor::from_f64(&shape, &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        FlowSample::new(x0, x1, vec![t], vec![], vec![vec![]], mask).unwrap()
    }

    #[test]
    fn interpolation_endpoints() {
        let x0 = Tensor::<f64>::from_f64(&[2], &[0.3, -1.7]).unwrap();
        let x1 = Tensor::<f64>::from_f64(&[2], &[2.0, 5.5]).unwrap();
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1);
        let z = Tensor::<f64>::zeros(&[1]);
        let two = Tensor::<f64>::full(&[1], 2.0);
        assert_eq!(interpolate(&z, &two, 0.5).unwrap().item(), 1.0);
        assert!(interpolate(&z, &two, 1.5).is_err());
    }

    #[test]
    fn ssp_examples() {
        let s = sample(0, 0.4);
        let mut g = Graph::new();
        let oracle = OracleField { u: s.u.clone() };
        let l = ssp_loss(&mut g, &oracle, &s).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let shape = [1, 3, 2, 2];
        let ones = Tensor::full(&shape, 1.0);
        let s = FlowSample::new(Tensor::zeros(&shape), ones, vec![0.5], vec![], vec![vec![]], Tensor::zeros(&shape))
            .unwrap();
        let zero = OracleField { u: Tensor::zeros(&shape) };
        let l = ssp_loss(&mut g, &zero, &s).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
    }

    #[test]
    fn mtp_reduces_to_ssp_and_is_zero_for_the_oracle() {
        let s = sample(3, 0.8);
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(0.7), true);
        let field = LinearField { a };
        let ssp = ssp_loss(&mut g, &field, &s).unwrap();
        let mtp = mtp_loss(&mut g, &field, &s, 1, 0.03, false).unwrap();
        assert_eq!(g.value(ssp).item().to_bits(), g.value(mtp.loss).item().to_bits());

        let oracle = OracleField { u: s.u.clone() };
        for k in 1..=3 {
            let c = mtp_loss(&mut g, &oracle, &s, k, 0.1, false).unwrap();
            assert_eq!(g.value(c.loss).item(), 0.0);
            for (step, &x) in c.states.iter().enumerate() {
                let truth = interpolate(&s.x0, &s.x1, 0.8 - step as f64 * 0.1).unwrap();
                assert!(g.value(x).max_abs_diff(&truth) < 1e-12);
            }
        }
        assert!(mtp_loss(&mut g, &oracle, &s, 10, 0.1, false).is_err());
    }

    #[test]
    fn mtp_two_steps_by_hand() {
        let (a, dt, t) = (0.7, 0.05, 0.6);
        let s = sample(4, t);
        let mut g = Graph::new();
        let av = g.leaf(Tensor::scalar(a), true);
        let c = mtp_loss(&mut g, &LinearField { a: av }, &s, 2, dt, false).unwrap();
        let n = s.u.numel() as f64;
        let (mut e0, mut e1) = (0.0, 0.0);
        for (&x, &u) in s.x_t.data().iter().zip(s.u.data()) {
            e0 += (a * x - u).powi(2);
            let x1 = x - dt * a * x;
            e1 += (a * x1 - u).powi(2);
        }
        let expected = (e0 / n + e1 / n) / 2.0;
        assert!((g.value(c.loss).item() - expected).abs() < 1e-14);
    }

    #[test]
    fn detached_chain_drops_the_unrolled_gradient() {
        let s = sample(5, 0.5);
        let grad = |detach| {
            let mut g = Graph::<f64>::new();
            let a = g.leaf(Tensor::scalar(0.4), true);
            let c = mtp_loss(&mut g, &LinearField { a }, &s, 2, 0.1, detach).unwrap();
            g.backward(c.loss).unwrap();
            g.grad(a).unwrap().item()
        };
        assert_ne!(grad(false), grad(true));
    }

    #[test]
    fn align_examples() {
        let shape = [1, 1, 2, 2];
        let mask = Tensor::<f64>::from_f64(&shape, &[1.0, 1.0, 0.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_f64(&shape, &[1.0, 0.0, 5.0, 5.0]).unwrap());
        let b = g.constant(Tensor::from_f64(&shape, &[0.0, 2.0, -3.0, 9.0]).unwrap());
        let same = align_loss(&mut g, a, a, &mask, &IdentityExtractor).unwrap().unwrap();
        assert!(g.value(same).item().abs() < 1e-15);
        let orth = align_loss(&mut g, a, b, &mask, &IdentityExtractor).unwrap().unwrap();
        assert_eq!(g.value(orth).item(), 1.0);
        assert!(align_loss(&mut g, a, b, &Tensor::zeros(&shape), &IdentityExtractor)
            .unwrap()
            .is_none());
        let dark = g.constant(Tensor::from_f64(&shape, &[0.0, 0.0, 5.0, 5.0]).unwrap());
        assert!(align_loss(&mut g, a, dark, &mask, &IdentityExtractor).unwrap().is_none());
    }

    #[test]
    fn orthogonal_extractor_has_orthonormal_columns() {
        let e = OrthogonalExtractor::<f64>::new(12, 5, 1).unwrap();
        let q = e.matrix.data();
        for i in 0..5 {
            for j in 0..5 {
                let dot: f64 = (0..12).map(|r| q[r * 5 + i] * q[r * 5 + j]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        assert!(OrthogonalExtractor::<f64>::new(3, 4, 0).is_err());
    }

    #[test]
    fn total_is_weighted_sum() {
        let s = sample(6, 0.7);
        let e = OrthogonalExtractor::<f64>::new(8, 8, 2).unwrap();
        for lambda in [0.0, 0.1, 0.5] {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::scalar(-0.3), true);
            let cfg = ObjectiveConfig {
                lambda,
                ..ObjectiveConfig::default()
            };
            let l = total_loss(&mut g, &LinearField { a }, &s, &cfg, &e).unwrap();
            let b = &l.breakdown;
            assert!((b.total - (b.l_mtp + lambda * b.l_align)).abs() < 1e-12);
            if lambda == 0.0 {
                assert_eq!(b.total, b.l_mtp);
            } else {
                assert!(b.l_align > 0.0);
            }
        }
        let mut g = Graph::new();
        let l = total_loss(&mut g, &OracleField { u: s.u.clone() }, &s, &ObjectiveConfig::default(), &e).unwrap();
        assert_eq!(l.breakdown.l_mtp, 0.0);
        assert!(l.breakdown.total < 1e-12);
    }

    #[test]
    fn time_sampling_respects_the_unroll() {
        let mut rng = stream(0, 0);
        for _ in 0..1000 {
            let t = sample_time(&mut rng, 3, 0.1).unwrap();
            assert!((0.2..=1.0).contains(&t));
        }
        assert!(sample_time(&mut rng, 50, 0.1).is_err());
    }
}
