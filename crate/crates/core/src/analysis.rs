//! Empirical checks of the learned field: Lipschitz estimates along sampled
//! trajectories, adjacent-step smoothness of the unrolled objective, Euler
//! error against step size, and paired training comparisons.

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_task, Dataset, Task, TaskInstance};
use crate::error::{invalid, Error, Result};
use crate::model::{ParamVars, ToyDiT};
use crate::numerics::rng::{child_id, normal, stream};
use crate::numerics::{Float, Graph, Tensor};
use crate::objective::{mtp_loss, sample_time, smoothness_bounds, FlowSample, ModelField};
use crate::sampler::{integrate, steps_for, ConditionedModel, SampleConfig, VelocityField};
use crate::trainer::{evaluate, train, TrainConfig, TrainOptions};

const PAIR_STREAM: u64 = 0x6c69_7073;
const NOISE_STREAM: u64 = 0x6e6f_6973;
const CHAIN_STREAM: u64 = 0x6368_6169;
const CHUNK: usize = 16;
pub const DENOM_FLOOR: f64 = 1e-8;

/// Mean with its standard error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stderr: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self::default();
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, stderr }
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Nearest-rank quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let i = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[i]
}

/// A field evaluation `(x, t, v(x, t))`.
#[derive(Clone, Debug)]
pub struct FieldPoint<F: Float> {
    pub x: Tensor<F>,
    pub t: f64,
    pub v: Tensor<F>,
}

/// `‖v - v'‖ / max(‖x - x'‖ + |t - t'|, 1e-8)`.
pub fn lipschitz_ratio<F: Float>(a: &FieldPoint<F>, b: &FieldPoint<F>) -> f64 {
    let dist = |p: &Tensor<F>, q: &Tensor<F>| {
        p.data()
            .iter()
            .zip(q.data())
            .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let den = dist(&a.x, &b.x) + (a.t - b.t).abs();
    dist(&a.v, &b.v) / den.max(DENOM_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSampling {
    /// Consecutive trajectory states and random cross-time states of the
    /// same trajectory, alternating.
    Trajectory,
    /// Caller-supplied pairs.
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub l_hat: f64,
    pub n_pairs: usize,
    pub sampling: PairSampling,
    pub adjacent_pairs: usize,
    pub random_pairs: usize,
    pub ratios: Vec<f64>,
    pub median: f64,
    pub p90: f64,
    pub p99: f64,
}

impl LipschitzEstimate {
    pub fn from_ratios(ratios: Vec<f64>, sampling: PairSampling, adjacent: usize) -> Result<Self> {
        if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::NonFinite { op: "lipschitz ratio" });
        }
        let mut sorted = ratios.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            l_hat: sorted.last().copied().unwrap_or(0.0),
            n_pairs: ratios.len(),
            sampling,
            adjacent_pairs: adjacent,
            random_pairs: ratios.len() - adjacent,
            median: quantile(&sorted, 0.5),
            p90: quantile(&sorted, 0.9),
            p99: quantile(&sorted, 0.99),
            ratios,
        })
    }

    /// Estimate over explicit pairs.
    pub fn from_pairs<F: Float>(pairs: &[(FieldPoint<F>, FieldPoint<F>)]) -> Result<Self> {
        let ratios = pairs.iter().map(|(a, b)| lipschitz_ratio(a, b)).collect();
        Self::from_ratios(ratios, PairSampling::Explicit, 0)
    }

    /// Estimate over the first `n` pairs only.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        let n = n.min(self.n_pairs);
        let adjacent = self.adjacent_pairs.min(n.div_ceil(2));
        Self::from_ratios(self.ratios[..n].to_vec(), self.sampling, adjacent)
    }
}

/// Pairs drawn from per-trajectory evaluations: even indices take
/// consecutive states, odd indices two distinct random states.
pub fn trajectory_estimate<F: Float>(
    trajectories: &[Vec<FieldPoint<F>>],
    n_pairs: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if n_pairs < 100 {
        return Err(invalid(format!("need at least 100 pairs, got {n_pairs}")));
    }
    if trajectories.is_empty() || trajectories.iter().any(|t| t.len() < 2) {
        return Err(invalid("need at least one trajectory of two or more states"));
    }
    let mut rng = stream(seed, PAIR_STREAM);
    let mut ratios = Vec::with_capacity(n_pairs);
    let mut adjacent = 0;
    for p in 0..n_pairs {
        let traj = &trajectories[rng.random_range(0..trajectories.len())];
        let n = traj.len();
        let (i, j) = if p % 2 == 0 {
            adjacent += 1;
            let i = rng.random_range(0..n - 1);
            (i, i + 1)
        } else {
            let i = rng.random_range(0..n);
            let j = (i + 1 + rng.random_range(0..n - 1)) % n;
            (i, j)
        };
        ratios.push(lipschitz_ratio(&traj[i], &traj[j]));
    }
    LipschitzEstimate::from_ratios(ratios, PairSampling::Trajectory, adjacent)
}

/// Records the unguided trajectory from `x1` (batched `[B, ...]`) and splits
/// it into per-sample field evaluations. The final state carries no
/// velocity and is dropped.
pub fn field_trajectories<F: Float>(
    field: &dyn VelocityField<F>,
    x1: &Tensor<F>,
    steps: usize,
) -> Result<Vec<Vec<FieldPoint<F>>>> {
    let out = integrate(field, x1, steps, 1.0, true)?;
    let traj = out.trajectory.expect("recorded");
    let b = x1.shape()[0];
    let mut per = vec![Vec::with_capacity(steps); b];
    for p in &traj.points {
        let Some(v) = &p.v else { continue };
        for (i, dst) in per.iter_mut().enumerate() {
            dst.push(FieldPoint {
                x: p.x.slice_leading(i)?,
                t: p.t,
                v: v.slice_leading(i)?,
            });
        }
    }
    Ok(per)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LipschitzConfig {
    pub n_pairs: usize,
    pub items: usize,
    pub steps: usize,
    pub task: Task,
    pub seed: u64,
}

impl Default for LipschitzConfig {
    fn default() -> Self {
        Self {
            n_pairs: 10_000,
            items: 16,
            steps: 30,
            task: Task::ModelBasedTryon,
            seed: 0,
        }
    }
}

/// Item `i`'s starting noise, independent of chunking.
fn item_noise<F: Float>(seed: u64, index: usize, shape: &[usize]) -> Tensor<F> {
    normal(&mut stream(seed, child_id(NOISE_STREAM, index as u64)), shape)
}

fn stack_conditions<F: Float>(chunk: &[TaskInstance]) -> Result<Vec<Tensor<F>>> {
    let refs = chunk[0].conditions.len();
    (0..refs)
        .map(|r| Tensor::stack(&chunk.iter().map(|c| c.conditions[r].cast::<F>()).collect::<Vec<_>>()))
        .collect()
}

/// Lipschitz estimate of the conditional field on the first `cfg.items`
/// held-out items.
pub fn estimate_lipschitz<F: Float>(model: &ToyDiT<F>, eval: &Dataset, cfg: &LipschitzConfig) -> Result<LipschitzEstimate> {
    if eval.is_empty() || cfg.items == 0 {
        return Err(invalid("evaluation set is empty"));
    }
    if cfg.n_pairs < 100 {
        return Err(invalid(format!("need at least 100 pairs, got {}", cfg.n_pairs)));
    }
    let shape = model.config().image_shape();
    let instances: Vec<TaskInstance> = eval.items.iter().take(cfg.items).map(|t| make_task(t, cfg.task)).collect();
    let mut trajectories = Vec::new();
    for (c, chunk) in instances.chunks(CHUNK).enumerate() {
        let x1 = Tensor::stack(
            &(0..chunk.len())
                .map(|i| item_noise::<F>(cfg.seed, c * CHUNK + i, &shape))
                .collect::<Vec<_>>(),
        )?;
        let field = ConditionedModel::new(model, stack_conditions(chunk)?, chunk.iter().map(|i| i.text_ids.clone()).collect());
        trajectories.extend(field_trajectories(&field, &x1, cfg.steps)?);
    }
    trajectory_estimate(&trajectories, cfg.n_pairs, cfg.seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub k: usize,
    pub dt: f64,
    pub samples: usize,
    /// Per-element mean of `Σ_k ‖v_{k+1} - v_k‖²`.
    pub r_smooth: Stat,
    pub l_mtp: Stat,
    /// Per-step squared error, one entry per unrolled time.
    pub l_ssp: Vec<Stat>,
    /// `l_mtp - mean_k l_ssp(t_k)`.
    pub slack: f64,
    pub pairs_checked: usize,
    pub violations: usize,
    pub note: Option<String>,
}

/// Accumulates unrolled chains sample by sample.
#[derive(Clone, Debug)]
pub struct SmoothnessAccumulator {
    k: usize,
    dt: f64,
    r: Vec<f64>,
    mtp: Vec<f64>,
    ssp: Vec<Vec<f64>>,
    checked: usize,
    violations: usize,
}

impl SmoothnessAccumulator {
    pub fn new(k: usize, dt: f64) -> Self {
        Self {
            k,
            dt,
            r: Vec::new(),
            mtp: Vec::new(),
            ssp: vec![Vec::new(); k],
            checked: 0,
            violations: 0,
        }
    }

    /// Adds a batched chain: `k` velocity tensors and the target velocity,
    /// all `[B, ...]`.
    pub fn add_chain<F: Float>(&mut self, velocities: &[Tensor<F>], u: &Tensor<F>) -> Result<()> {
        if velocities.len() != self.k {
            return Err(invalid(format!("expected {} velocities, got {}", self.k, velocities.len())));
        }
        for i in 0..u.shape()[0] {
            let ui = u.slice_leading(i)?;
            let vs = velocities.iter().map(|v| v.slice_leading(i)).collect::<Result<Vec<_>>>()?;
            let n = ui.numel() as f64;
            let terms: Vec<f64> = vs
                .iter()
                .map(|v| {
                    v.data()
                        .iter()
                        .zip(ui.data())
                        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
                        .sum::<f64>()
                        / n
                })
                .collect();
            let bounds = smoothness_bounds(&vs, &ui);
            self.checked += bounds.len();
            self.violations += bounds.iter().filter(|(l, r)| l > r).count();
            self.r.push(bounds.iter().map(|(l, _)| l).sum::<f64>() / n);
            self.mtp.push(terms.iter().sum::<f64>() / self.k as f64);
            for (s, t) in self.ssp.iter_mut().zip(terms) {
                s.push(t);
            }
        }
        Ok(())
    }

    pub fn report(&self) -> SmoothnessReport {
        let l_mtp = Stat::of(&self.mtp);
        let l_ssp: Vec<Stat> = self.ssp.iter().map(|s| Stat::of(s)).collect();
        let mean_ssp = l_ssp.iter().map(|s| s.mean).sum::<f64>() / self.k.max(1) as f64;
        SmoothnessReport {
            k: self.k,
            dt: self.dt,
            samples: self.mtp.len(),
            r_smooth: Stat::of(&self.r),
            slack: l_mtp.mean - mean_ssp,
            l_mtp,
            l_ssp,
            pairs_checked: self.checked,
            violations: self.violations,
            note: (self.k < 2).then(|| "no adjacent pairs".to_string()),
        }
    }
}

/// Builds `n` training-style chains on held-out items (cycling through
/// `eval`) and measures adjacent-step smoothness of the model's field.
pub fn measure_smoothness<F: Float>(
    model: &ToyDiT<F>,
    eval: &Dataset,
    task: Task,
    k: usize,
    dt: f64,
    n_samples: usize,
    seed: u64,
) -> Result<SmoothnessReport> {
    if eval.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let cfg = model.config();
    let shape = cfg.image_shape();
    let mut acc = SmoothnessAccumulator::new(k, dt);
    let mut done = 0;
    while done < n_samples {
        let b = CHUNK.min(n_samples - done);
        let (mut x0, mut x1, mut ts, mut text, mut masks) = (vec![], vec![], vec![], vec![], vec![]);
        let mut insts = Vec::with_capacity(b);
        for j in done..done + b {
            let inst = make_task(&eval.items[j % eval.len()], task);
            let mut rng = stream(seed, child_id(CHAIN_STREAM, j as u64));
            x1.push(normal::<F>(&mut rng, &shape));
            ts.push(sample_time(&mut rng, k, dt)?);
            x0.push(inst.target.cast::<F>());
            text.push(inst.text_ids.clone());
            masks.push(inst.mask.to_tensor::<F>());
            insts.push(inst);
        }
        let sample = FlowSample::new(
            Tensor::stack(&x0)?,
            Tensor::stack(&x1)?,
            ts,
            stack_conditions(&insts)?,
            text,
            Tensor::stack(&masks)?,
        )?;
        let plan = model.plan(task.reference_count(), sample.text_ids[0].len(), b)?;
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, &model.params, false);
        let field = ModelField {
            config: cfg,
            params: &pv,
            plan: &plan,
            conditions: sample.conditions.iter().map(|c| g.constant(c.clone())).collect(),
            text_ids: sample.text_ids.concat(),
        };
        let chain = mtp_loss(&mut g, &field, &sample, k, dt, true)?;
        let vs: Vec<Tensor<F>> = chain.velocities.iter().map(|&v| g.value(v).clone()).collect();
        acc.add_chain(&vs, &sample.u)?;
        done += b;
    }
    Ok(acc.report())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPoint {
    pub dt: f64,
    pub steps: usize,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub points: Vec<ErrorPoint>,
    /// Least-squares slope of `ln error` against `ln dt`; `None` when exact.
    pub slope: Option<f64>,
    /// Fitted `ln C` of `error ≈ C·dt^slope`.
    pub intercept: Option<f64>,
    pub exact: bool,
    /// Adjacent pairs where the error grew as `dt` shrank.
    pub inversions: usize,
    pub reference: String,
    pub l_hat: Option<f64>,
}

/// What integrated endpoints are compared against.
pub enum ErrorReference<F: Float> {
    /// Known data endpoints `x0`.
    Exact(Tensor<F>),
    /// `2·x(N_ref) - x(N_ref / 2)` from the field itself, with `N_ref`
    /// twice the finest grid.
    Richardson,
}

const EXACT_BELOW: f64 = 1e-10;

/// Euler endpoints for every `dt` from shared `x1`, scored by mean
/// per-sample distance to the reference.
pub fn error_vs_dt<F: Float>(
    field: &dyn VelocityField<F>,
    x1: &Tensor<F>,
    dts: &[f64],
    reference: ErrorReference<F>,
) -> Result<ErrorCurve> {
    if dts.len() < 4 {
        return Err(invalid(format!("need at least 4 step sizes, got {}", dts.len())));
    }
    let mut dts = dts.to_vec();
    dts.sort_by(|a, b| b.total_cmp(a));
    dts.dedup();
    if dts.len() < 4 || dts[0] / dts[dts.len() - 1] < 8.0 - 1e-9 {
        return Err(invalid("step sizes must be distinct and span at least 8x"));
    }
    let steps = dts.iter().map(|&d| steps_for(d)).collect::<Result<Vec<_>>>()?;
    let run = |n: usize| integrate(field, x1, n, 1.0, false).map(|o| o.raw);
    let (target, label) = match reference {
        ErrorReference::Exact(x0) => (x0, "exact".to_string()),
        ErrorReference::Richardson => {
            let fine = 2 * steps.iter().max().expect("nonempty");
            let (a, b) = (run(fine)?, run(fine / 2)?);
            (a.zip_map(&b, |p, q| p + p - q)?, format!("richardson({fine})"))
        }
    };
    let b = x1.shape()[0];
    let mut points = Vec::new();
    for (&dt, &n) in dts.iter().zip(&steps) {
        let x = run(n)?;
        let mut err = 0.0;
        for i in 0..b {
            let (p, q) = (x.slice_leading(i)?, target.slice_leading(i)?);
            err += p
                .data()
                .iter()
                .zip(q.data())
                .map(|(&a, &c)| (a.as_f64() - c.as_f64()).powi(2))
                .sum::<f64>()
                .sqrt();
        }
        points.push(ErrorPoint {
            dt,
            steps: n,
            error: err / b as f64,
        });
    }
    let exact = points.iter().all(|p| p.error < EXACT_BELOW);
    let (slope, intercept) = if exact || points.iter().any(|p| p.error <= 0.0) {
        (None, None)
    } else {
        let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().map(|p| (p.dt.ln(), p.error.ln())).unzip();
        let (s, c) = least_squares(&xs, &ys);
        (Some(s), Some(c))
    };
    let inversions = points.windows(2).filter(|w| w[1].error > w[0].error).count();
    Ok(ErrorCurve {
        points,
        slope,
        intercept,
        exact,
        inversions,
        reference: label,
        l_hat: None,
    })
}

/// Slope and intercept of the least-squares line through `(xs, ys)`.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Conditional field of the model on the first `items` held-out instances,
/// with the matching noise draws.
pub fn model_error_curve<F: Float>(
    model: &ToyDiT<F>,
    eval: &Dataset,
    task: Task,
    items: usize,
    dts: &[f64],
    seed: u64,
) -> Result<ErrorCurve> {
    let instances: Vec<TaskInstance> = eval.items.iter().take(items.min(CHUNK)).map(|t| make_task(t, task)).collect();
    if instances.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let shape = model.config().image_shape();
    let x1 = Tensor::stack(&(0..instances.len()).map(|i| item_noise::<F>(seed, i, &shape)).collect::<Vec<_>>())?;
    let field = ConditionedModel::new(
        model,
        stack_conditions(&instances)?,
        instances.iter().map(|i| i.text_ids.clone()).collect(),
    );
    error_vs_dt(&field, &x1, dts, ErrorReference::Richardson)
}

/// Shared knobs of the paired-training experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    pub lipschitz: LipschitzConfig,
    pub eval_items: usize,
    /// Unroll depth of the multi-step arm; the other arm uses `k_base`.
    pub k_mtp: usize,
    pub k_base: usize,
    /// Step sizes for per-seed error curves; empty skips them.
    pub error_dts: Vec<f64>,
    pub sample: SampleConfig,
    /// Arms trained at once.
    pub threads: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            lipschitz: LipschitzConfig::default(),
            eval_items: 16,
            k_mtp: 2,
            k_base: 1,
            error_dts: Vec::new(),
            sample: SampleConfig::default(),
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub seed: u64,
    pub k: usize,
    pub lambda: f64,
    pub diverged: bool,
    pub l_hat: Option<f64>,
    pub final_loss: Option<f64>,
    pub metric: Option<f64>,
    pub error_curve: Option<ErrorCurve>,
    pub ratios: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub baseline: Vec<ArmResult>,
    pub treatment: Vec<ArmResult>,
    pub excluded: Vec<u64>,
    pub median_baseline: Option<f64>,
    pub median_treatment: Option<f64>,
    /// For the Lipschitz comparison: treatment median strictly lower.
    /// For the alignment comparison: treatment median strictly higher.
    pub verdict: bool,
}

impl ComparisonReport {
    /// `seed,arm,k,lambda,diverged,value`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["seed", "arm", "k", "lambda", "diverged", "value"])?;
        for (arm, rows) in [("baseline", &self.baseline), ("treatment", &self.treatment)] {
            for r in rows {
                let v = match self.experiment.as_str() {
                    "ssp_vs_mtp" => r.l_hat,
                    _ => r.metric,
                };
                w.write_record([
                    r.seed.to_string(),
                    arm.to_string(),
                    r.k.to_string(),
                    r.lambda.to_string(),
                    r.diverged.to_string(),
                    v.map_or(String::new(), |v| v.to_string()),
                ])?;
            }
        }
        String::from_utf8(w.into_inner().map_err(|e| invalid(e.to_string()))?).map_err(|e| invalid(e.to_string()))
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv()?)?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Trains one arm. Divergence is reported, not propagated.
fn run_arm<F: Float>(cfg: &TrainConfig, data: &Dataset) -> Result<Option<(ToyDiT<F>, Option<f64>)>> {
    match train::<F>(cfg, data, &TrainOptions::default()) {
        Ok(out) => Ok(Some((ToyDiT::new(out.params), out.metrics.last().map(|r| r.total)))),
        Err(Error::TrainingDiverged { step }) => {
            warn!("seed {} diverged at step {step}", cfg.seed);
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn arm_cfg(base: &TrainConfig, seed: u64, k: usize, lambda: f64) -> TrainConfig {
    let mut c = base.clone();
    c.seed = seed;
    c.objective.k = k;
    c.objective.lambda = lambda;
    c
}

/// Runs `f` on every job, up to `threads` at a time; results keep job order.
fn run_jobs<J: Sync, T: Send>(jobs: &[J], threads: usize, f: impl Fn(&J) -> Result<T> + Sync) -> Result<Vec<T>> {
    if threads <= 1 {
        return jobs.iter().map(&f).collect();
    }
    let mut out = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(threads) {
        let results: Vec<Result<T>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|j| s.spawn(|| f(j))).collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

fn finish(experiment: &str, seeds: &[u64], results: Vec<ArmResult>, lower: bool) -> ComparisonReport {
    let (baseline, treatment): (Vec<ArmResult>, Vec<ArmResult>) =
        results.chunks(2).map(|p| (p[0].clone(), p[1].clone())).unzip();
    let value = |r: &ArmResult| if experiment == "ssp_vs_mtp" { r.l_hat } else { r.metric };
    let excluded: Vec<u64> = baseline
        .iter()
        .zip(&treatment)
        .filter(|(a, b)| value(a).is_none() || value(b).is_none())
        .map(|(a, _)| a.seed)
        .collect();
    let kept = |rows: &[ArmResult]| -> Vec<f64> {
        rows.iter()
            .filter(|r| !excluded.contains(&r.seed))
            .filter_map(value)
            .collect()
    };
    let (mb, mt) = (median(&kept(&baseline)), median(&kept(&treatment)));
    let verdict = match (mb, mt) {
        (Some(b), Some(t)) if lower => t < b,
        (Some(b), Some(t)) => t > b,
        _ => false,
    };
    ComparisonReport {
        experiment: experiment.into(),
        seeds: seeds.to_vec(),
        baseline,
        treatment,
        excluded,
        median_baseline: mb,
        median_treatment: mt,
        verdict,
    }
}

fn empty_arm(cfg: &TrainConfig, diverged: bool) -> ArmResult {
    ArmResult {
        seed: cfg.seed,
        k: cfg.objective.k,
        lambda: cfg.objective.lambda,
        diverged,
        l_hat: None,
        final_loss: None,
        metric: None,
        error_curve: None,
        ratios: Vec::new(),
    }
}

/// Paired trainings differing only in unroll depth; compares Lipschitz
/// estimates on the held-out set.
pub fn compare_ssp_mtp<F: Float>(cfg: &TrainConfig, seeds: &[u64], opts: &CompareConfig) -> Result<ComparisonReport> {
    if seeds.len() < 3 {
        return Err(invalid(format!("need at least 3 seeds, got {}", seeds.len())));
    }
    let data = cfg.data.train_set(cfg.model.image_size)?;
    let eval = cfg.data.eval_set(cfg.model.image_size, opts.eval_items.max(opts.lipschitz.items))?;
    let jobs: Vec<TrainConfig> = seeds
        .iter()
        .flat_map(|&s| [opts.k_base, opts.k_mtp].map(|k| arm_cfg(cfg, s, k, cfg.objective.lambda)))
        .collect();
    let results = run_jobs(&jobs, opts.threads, |c| {
        info!("compare: seed {}, K = {}", c.seed, c.objective.k);
        let model = run_arm::<F>(c, &data)?;
        let mut r = empty_arm(c, model.is_none());
        if let Some((m, last)) = &model {
            r.final_loss = *last;
            let est = estimate_lipschitz(m, &eval, &opts.lipschitz)?;
            r.l_hat = Some(est.l_hat);
            if !opts.error_dts.is_empty() {
                let mut curve = model_error_curve(m, &eval, opts.lipschitz.task, CHUNK, &opts.error_dts, c.seed)?;
                curve.l_hat = Some(est.l_hat);
                r.error_curve = Some(curve);
            }
            r.ratios = est.ratios;
        }
        Ok(r)
    })?;
    Ok(finish("ssp_vs_mtp", seeds, results, true))
}

/// Mean masked cosine over `tasks`.
fn alignment_metric<F: Float>(model: &ToyDiT<F>, eval: &Dataset, tasks: &[Task], sample: &SampleConfig) -> Result<f64> {
    let report = evaluate(model, eval, tasks, sample)?;
    Ok(report.tasks.values().map(|m| m.masked_cosine).sum::<f64>() / report.tasks.len() as f64)
}

/// Paired trainings with and without the alignment term (`cfg.objective.lambda`
/// versus 0); compares held-out masked cosine similarity averaged over the
/// final stage's tasks.
pub fn compare_alignment<F: Float>(cfg: &TrainConfig, seeds: &[u64], opts: &CompareConfig) -> Result<ComparisonReport> {
    if seeds.len() < 3 {
        return Err(invalid(format!("need at least 3 seeds, got {}", seeds.len())));
    }
    if cfg.objective.lambda <= 0.0 {
        return Err(invalid("alignment comparison needs lambda > 0"));
    }
    let data = cfg.data.train_set(cfg.model.image_size)?;
    let eval = cfg.data.eval_set(cfg.model.image_size, opts.eval_items)?;
    let tasks = cfg.stages.last().map(|s| s.tasks.clone()).unwrap_or_default();
    let jobs: Vec<TrainConfig> = seeds
        .iter()
        .flat_map(|&s| [0.0, cfg.objective.lambda].map(|l| arm_cfg(cfg, s, cfg.objective.k, l)))
        .collect();
    let results = run_jobs(&jobs, opts.threads, |c| {
        info!("compare: seed {}, lambda = {}", c.seed, c.objective.lambda);
        let model = run_arm::<F>(c, &data)?;
        let mut r = empty_arm(c, model.is_none());
        if let Some((m, last)) = &model {
            r.final_loss = *last;
            r.metric = Some(alignment_metric(m, &eval, &tasks, &opts.sample)?);
        }
        Ok(r)
    })?;
    Ok(finish("alignment", seeds, results, false))
}

/// Minimal line chart: one polyline per series over shared axes.
pub fn svg_lines(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 56.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    for (v, x, y, anchor) in [
        (x0, sx(x0), H - PAD + 16.0, "start"),
        (x1, sx(x1), H - PAD + 16.0, "end"),
    ] {
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}" font-size="11">{v:.3}</text>"#);
    }
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}" text-anchor="end" font-size="11">{v:.3}</text>"#, PAD - 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (i, (name, p)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let d: Vec<String> = p
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .enumerate()
            .map(|(j, &(x, y))| format!("{}{:.2} {:.2}", if j == 0 { "M" } else { "L" }, sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            W - PAD + 4.0 - 120.0,
            PAD + 14.0 * (i as f64 + 1.0),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Sorted ratios against their empirical CDF, one series per arm.
pub fn ratio_cdf(ratios: &[f64]) -> Vec<(f64, f64)> {
    let mut r = ratios.to_vec();
    r.sort_by(f64::total_cmp);
    let n = r.len() as f64;
    r.into_iter().enumerate().map(|(i, x)| (x, (i + 1) as f64 / n)).collect()
}
