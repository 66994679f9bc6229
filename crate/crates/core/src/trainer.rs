//! Two-stage optimization loop, AdamW, checkpoints and held-out evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{make_task, vocab, BatchPlan, Batch, Dataset, Image, Task, TaskInstance};
use crate::error::{invalid, Error, Result};
use crate::model::{ModelConfig, ParamVars, SequencePlan, ToyDiT, ToyDiTParams};
use crate::numerics::rng::{child_id, normal, stream, uniform};
use crate::numerics::{odt, Float, Graph, Tensor};
use crate::objective::{
    sample_time, smoothness_bounds, total_loss, FeatureExtractor, FlowSample, IdentityExtractor, LossBreakdown,
    ModelField, ObjectiveConfig, OrthogonalExtractor,
};
use crate::sampler::{integrate, ConditionedModel, SampleConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const TRAIN_STREAM: u64 = 0x7472_6169_6e00;
const EVAL_NOISE: u64 = 0x6576_616c;
const EVAL_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub steps: usize,
    pub tasks: Vec<Task>,
    pub batch: usize,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub clip: f64,
    /// Linear ramp length in steps.
    pub warmup: usize,
    /// Cosine decay over the whole schedule down to this fraction of each
    /// stage's rate; `None` keeps the rate constant.
    pub cosine_floor: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
            clip: 1.0,
            warmup: 0,
            cosine_floor: None,
        }
    }
}

/// Frozen feature map of the alignment term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractorConfig {
    Identity,
    /// Orthonormal projection; `features` defaults to the full pixel count.
    Orthogonal { features: Option<usize>, seed: u64 },
}

impl ExtractorConfig {
    pub fn build<F: Float>(&self, pixels: usize) -> Result<Box<dyn FeatureExtractor<F>>> {
        Ok(match *self {
            ExtractorConfig::Identity => Box::new(IdentityExtractor),
            ExtractorConfig::Orthogonal { features, seed } => {
                Box::new(OrthogonalExtractor::<F>::new(pixels, features.unwrap_or(pixels), seed)?)
            }
        })
    }
}

/// Training set: `size` triplets keyed by `seed`. Held-out items come from
/// the indices after `size`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { seed: 0, size: 512 }
    }
}

impl DataConfig {
    pub fn train_set(&self, image_size: usize) -> Result<Dataset> {
        Dataset::generate(self.seed, self.size, image_size)
    }

    pub fn eval_set(&self, image_size: usize, n: usize) -> Result<Dataset> {
        Dataset::generate_range(self.seed, self.size..self.size + n, image_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stages: Vec<StageConfig>,
    pub objective: ObjectiveConfig,
    /// Probability of dropping every condition of a sample at once.
    pub cfg_dropout: f64,
    pub seed: u64,
    pub optim: OptimConfig,
    pub extractor: ExtractorConfig,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: DataConfig::default(),
            stages: Self::two_stage(1000, 1000, 8, 1e-3),
            objective: ObjectiveConfig::default(),
            cfg_dropout: 0.1,
            seed: 0,
            optim: OptimConfig::default(),
            extractor: ExtractorConfig::Orthogonal {
                features: None,
                seed: 0,
            },
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Single-reference tasks first, then all three.
    pub fn two_stage(first: usize, second: usize, batch: usize, lr: f64) -> Vec<StageConfig> {
        vec![
            StageConfig {
                steps: first,
                tasks: vec![Task::ModelFreeTryon, Task::Tryoff],
                batch,
                lr,
            },
            StageConfig {
                steps: second,
                tasks: Task::ALL.to_vec(),
                batch,
                lr,
            },
        ]
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    /// `(stage index, step within stage)` of global step `step`.
    pub fn stage_at(&self, step: usize) -> Option<(usize, usize)> {
        let mut start = 0;
        for (i, s) in self.stages.iter().enumerate() {
            if step < start + s.steps {
                return Some((i, step - start));
            }
            start += s.steps;
        }
        None
    }

    /// Learning rate of global `step` after warmup and decay.
    pub fn lr_at(&self, step: usize) -> Option<f64> {
        let (si, _) = self.stage_at(step)?;
        let o = &self.optim;
        let warm = if step < o.warmup { (step + 1) as f64 / o.warmup as f64 } else { 1.0 };
        let decay = o.cosine_floor.map_or(1.0, |floor| {
            let p = step as f64 / self.total_steps().max(1) as f64;
            floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        });
        Some(self.stages[si].lr * warm * decay)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.objective.k == 0 {
            return Err(invalid("K must be at least 1"));
        }
        if (self.objective.k - 1) as f64 * self.objective.dt >= 1.0 || self.objective.dt <= 0.0 {
            return Err(invalid("unrolled steps must fit inside [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout) {
            return Err(invalid(format!("cfg_dropout {} outside [0, 1]", self.cfg_dropout)));
        }
        if self.data.size == 0 {
            return Err(invalid("training set is empty"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(invalid(format!("stage {} lr must be > 0", i + 1)));
            }
            BatchPlan::new(self.data.size, (i + 1) as u8, s.batch, 0, s.tasks.clone(), (1, 1))?;
        }
        if let Some(f) = self.optim.cosine_floor {
            if !(0.0..=1.0).contains(&f) {
                return Err(invalid(format!("cosine floor {f} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// FNV-1a of the canonical JSON, as hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Adam moments with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<F: Float> {
    pub cfg: OptimConfig,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub t: u64,
}

impl<F: Float> AdamW<F> {
    pub fn new(cfg: OptimConfig, params: &[Tensor<F>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>], lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in it {
                let g = g.as_f64();
                let mm = c.beta1 * m.as_f64() + (1.0 - c.beta1) * g;
                let vv = c.beta2 * v.as_f64() + (1.0 - c.beta2) * g * g;
                *m = F::of(mm);
                *v = F::of(vv);
                let step = (mm / bc1) / ((vv / bc2).sqrt() + c.eps);
                let x = p.as_f64();
                *p = F::of(x - lr * (step + c.weight_decay * x));
            }
        }
    }
}

pub fn global_norm<F: Float>(grads: &[Tensor<F>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grads<F: Float>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = F::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub l_mtp: f64,
    pub l_align: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub stage: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointState {
    version: u32,
    step: usize,
    config_hash: String,
    optimizer_step: u64,
    /// Every step draws from ChaCha8 keyed by `(seed, child(stream, step))`,
    /// so the step counter is the whole generator state.
    rng: RngState,
    config: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RngState {
    algorithm: String,
    seed: u64,
    stream: u64,
    next_step: usize,
}

/// Mutable training state over a borrowed dataset.
pub struct Trainer<'a, F: Float> {
    cfg: TrainConfig,
    data: &'a Dataset,
    params: ToyDiTParams<F>,
    opt: AdamW<F>,
    step: usize,
    plans: Vec<BatchPlan>,
    extractor: Box<dyn FeatureExtractor<F>>,
    layouts: HashMap<(usize, usize, usize), Arc<SequencePlan<F>>>,
    violations: usize,
}

impl<'a, F: Float> Trainer<'a, F> {
    pub fn new(cfg: &TrainConfig, data: &'a Dataset) -> Result<Self> {
        let params = ToyDiTParams::init(&cfg.model, cfg.seed)?;
        Self::with_params(cfg, data, params)
    }

    /// Starts from the given parameters with fresh optimizer state.
    pub fn with_params(cfg: &TrainConfig, data: &'a Dataset, params: ToyDiTParams<F>) -> Result<Self> {
        cfg.validate()?;
        if data.image_size != cfg.model.image_size {
            return Err(invalid(format!(
                "dataset images are {}px, model expects {}px",
                data.image_size, cfg.model.image_size
            )));
        }
        if data.len() < cfg.data.size {
            return Err(invalid(format!("dataset has {} items, config needs {}", data.len(), cfg.data.size)));
        }
        if params.config != cfg.model {
            return Err(invalid("parameters were built for a different model config"));
        }
        let plans = cfg
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                BatchPlan::new(
                    cfg.data.size,
                    (i + 1) as u8,
                    s.batch,
                    child_id(cfg.seed, i as u64),
                    s.tasks.clone(),
                    (1, 1),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let [c, h, w] = cfg.model.image_shape();
        Ok(Self {
            extractor: cfg.extractor.build(c * h * w)?,
            opt: AdamW::new(cfg.optim, params.tensors()),
            cfg: cfg.clone(),
            data,
            params,
            step: 0,
            plans,
            layouts: HashMap::new(),
            violations: 0,
        })
    }

    /// Restores a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(cfg: &TrainConfig, data: &'a Dataset, dir: &Path) -> Result<Self> {
        let state: CheckpointState = serde_json::from_str(&fs::read_to_string(dir.join("state.json"))?)?;
        if state.version != CHECKPOINT_VERSION {
            return Err(invalid(format!("checkpoint version {} unsupported", state.version)));
        }
        if state.config_hash != cfg.hash() {
            return Err(invalid("checkpoint was written under a different config"));
        }
        let params = ToyDiTParams::load(&dir.join("params"))?;
        let mut t = Self::with_params(cfg, data, params)?;
        let load = |prefix: &str| -> Result<Vec<Tensor<F>>> {
            t.params
                .names()
                .iter()
                .map(|n| odt::load(dir.join("optimizer").join(format!("{prefix}.{n}.odt"))))
                .collect()
        };
        let (m, v) = (load("m")?, load("v")?);
        t.opt.m = m;
        t.opt.v = v;
        t.opt.t = state.optimizer_step;
        t.step = state.step;
        Ok(t)
    }

    /// Writes params, optimizer moments and `state.json`, replacing `dir`
    /// only once the new copy is complete.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let tmp = dir.with_extension("partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        self.params.save(&tmp.join("params"))?;
        let opt_dir = tmp.join("optimizer");
        fs::create_dir_all(&opt_dir)?;
        for (i, n) in self.params.names().iter().enumerate() {
            odt::save(opt_dir.join(format!("m.{n}.odt")), &self.opt.m[i])?;
            odt::save(opt_dir.join(format!("v.{n}.odt")), &self.opt.v[i])?;
        }
        let state = CheckpointState {
            version: CHECKPOINT_VERSION,
            step: self.step,
            config_hash: self.cfg.hash(),
            optimizer_step: self.opt.t,
            rng: RngState {
                algorithm: "chacha8".into(),
                seed: self.cfg.seed,
                stream: TRAIN_STREAM,
                next_step: self.step,
            },
            config: self.cfg.clone(),
        };
        fs::write(tmp.join("state.json"), serde_json::to_string_pretty(&state)?)?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&tmp, dir)?;
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ToyDiTParams<F> {
        &self.params
    }

    pub fn into_params(self) -> ToyDiTParams<F> {
        self.params
    }

    pub fn optimizer(&self) -> &AdamW<F> {
        &self.opt
    }

    /// Next step to run.
    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn finished(&self) -> bool {
        self.step >= self.cfg.total_steps()
    }

    /// Adjacent-velocity bound violations seen so far (debug builds only).
    pub fn smoothness_violations(&self) -> usize {
        self.violations
    }

    pub fn batch_at(&self, step: usize) -> Result<Batch> {
        let (si, local) = self
            .cfg
            .stage_at(step)
            .ok_or_else(|| invalid(format!("step {step} is past the schedule")))?;
        Ok(self.plans[si].batch_at(local))
    }

    /// Noise, times and dropout of `step`, applied to `batch`.
    pub fn flow_sample(&self, batch: &Batch, step: usize) -> Result<FlowSample<F>> {
        let mut rng = stream(self.cfg.seed, child_id(TRAIN_STREAM, step as u64));
        let shape = self.cfg.model.image_shape();
        let refs = batch.reference_count();
        let (mut x0, mut x1, mut t, mut masks, mut text) = (vec![], vec![], vec![], vec![], vec![]);
        let mut conds: Vec<Vec<Tensor<F>>> = vec![Vec::new(); refs];
        for &(idx, task) in &batch.items {
            let inst = make_task(&self.data.items[idx], task);
            x1.push(normal::<F>(&mut rng, &shape));
            t.push(sample_time(&mut rng, self.cfg.objective.k, self.cfg.objective.dt)?);
            let dropped = uniform(&mut rng, 0.0, 1.0) < self.cfg.cfg_dropout;
            for (r, c) in inst.conditions.iter().enumerate() {
                conds[r].push(if dropped { Tensor::zeros(&shape) } else { c.cast() });
            }
            text.push(if dropped {
                vec![vocab::NULL; inst.text_ids.len()]
            } else {
                inst.text_ids.clone()
            });
            x0.push(inst.target.cast());
            masks.push(inst.mask.to_tensor::<F>());
        }
        let conditions = conds.iter().map(|c| Tensor::stack(c)).collect::<Result<Vec<_>>>()?;
        FlowSample::new(
            Tensor::stack(&x0)?,
            Tensor::stack(&x1)?,
            t,
            conditions,
            text,
            Tensor::stack(&masks)?,
        )
    }

    fn layout(&mut self, refs: usize, text_len: usize, batch: usize) -> Result<Arc<SequencePlan<F>>> {
        if let Some(p) = self.layouts.get(&(refs, text_len, batch)) {
            return Ok(p.clone());
        }
        let p = Arc::new(SequencePlan::new(&self.cfg.model, refs, text_len, batch)?);
        self.layouts.insert((refs, text_len, batch), p.clone());
        Ok(p)
    }

    /// Loss of `step`'s batch under the current parameters, without updating.
    pub fn loss_at(&mut self, step: usize) -> Result<LossBreakdown> {
        let batch = self.batch_at(step)?;
        let sample = self.flow_sample(&batch, step)?;
        let plan = self.layout(batch.reference_count(), vocab::PROMPT_LEN, batch.items.len())?;
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, &self.params, false);
        let field = self.field(&mut g, &pv, &plan, &sample);
        Ok(total_loss(&mut g, &field, &sample, &self.cfg.objective, self.extractor.as_ref())?.breakdown)
    }

    fn field<'b>(
        &'b self,
        g: &mut Graph<F>,
        pv: &'b ParamVars,
        plan: &'b SequencePlan<F>,
        sample: &FlowSample<F>,
    ) -> ModelField<'b, F> {
        ModelField {
            config: &self.cfg.model,
            params: pv,
            plan,
            conditions: sample.conditions.iter().map(|c| g.constant(c.clone())).collect(),
            text_ids: sample.text_ids.concat(),
        }
    }

    /// Runs one optimizer step.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let step = self.step;
        let (si, _) = self
            .cfg
            .stage_at(step)
            .ok_or_else(|| invalid("training schedule already finished"))?;
        let lr = self.cfg.lr_at(step).expect("step inside schedule");
        let batch = self.batch_at(step)?;
        let sample = self.flow_sample(&batch, step)?;
        let plan = self.layout(batch.reference_count(), vocab::PROMPT_LEN, batch.items.len())?;
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::TrainingDiverged { step },
            e => e,
        };
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, &self.params, true);
        let field = self.field(&mut g, &pv, &plan, &sample);
        let lg = total_loss(&mut g, &field, &sample, &self.cfg.objective, self.extractor.as_ref()).map_err(diverged)?;
        if !lg.breakdown.total.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        if cfg!(debug_assertions) {
            let vs: Vec<Tensor<F>> = lg.chain.velocities.iter().map(|&v| g.value(v).clone()).collect();
            let bad = count_violations(&vs, &sample.u)?;
            if bad > 0 {
                warn!("step {step}: {bad} adjacent-velocity bound violations");
            }
            self.violations += bad;
        }
        g.backward(lg.total).map_err(diverged)?;
        let mut grads: Vec<Tensor<F>> = pv.vars.iter().map(|&v| g.grad(v).expect("trainable leaf")).collect();
        let grad_norm = clip_grads(&mut grads, self.cfg.optim.clip);
        if !grad_norm.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        self.opt.update(self.params.tensors_mut(), &grads, lr);
        self.step += 1;
        Ok(MetricsRow {
            step,
            l_mtp: lg.breakdown.l_mtp,
            l_align: lg.breakdown.l_align,
            total: lg.breakdown.total,
            grad_norm,
            lr,
            stage: si + 1,
        })
    }
}

/// Per-sample check of `‖v_{k+1} - v_k‖² ≤ 2‖v_{k+1} - u‖² + 2‖v_k - u‖²`
/// on a batched chain.
pub fn count_violations<F: Float>(velocities: &[Tensor<F>], u: &Tensor<F>) -> Result<usize> {
    let b = u.shape()[0];
    let mut bad = 0;
    for i in 0..b {
        let vs = velocities.iter().map(|v| v.slice_leading(i)).collect::<Result<Vec<_>>>()?;
        bad += smoothness_bounds(&vs, &u.slice_leading(i)?)
            .iter()
            .filter(|(lhs, rhs)| lhs > rhs)
            .count();
    }
    Ok(bad)
}

/// Where a [`train`] run writes and where it stops.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Output directory for `metrics.csv` and `checkpoint/`.
    pub out: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Stop before this global step instead of at the end of the schedule.
    pub stop_at: Option<usize>,
}

pub struct TrainOutcome<F: Float> {
    pub params: ToyDiTParams<F>,
    /// Rows produced by this call (not those before a resume point).
    pub metrics: Vec<MetricsRow>,
    pub steps_done: usize,
    pub smoothness_violations: usize,
}

/// Runs the schedule, streaming metrics to CSV and checkpointing under
/// `opts.out`. On divergence the last written checkpoint is left in place.
pub fn train<F: Float>(cfg: &TrainConfig, data: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome<F>> {
    let mut trainer = match &opts.resume {
        Some(dir) => Trainer::resume(cfg, data, dir)?,
        None => Trainer::new(cfg, data)?,
    };
    let end = opts.stop_at.unwrap_or(usize::MAX).min(cfg.total_steps());
    let mut writer = match &opts.out {
        Some(out) => {
            fs::create_dir_all(out)?;
            let path = out.join("metrics.csv");
            let append = opts.resume.is_some() && path.exists();
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(path)?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
            if !append {
                w.write_record(["step", "l_mtp", "l_align", "total", "grad_norm", "lr", "stage"])?;
            }
            Some(w)
        }
        None => None,
    };
    let ckpt = opts.out.as_ref().map(|o| o.join("checkpoint"));
    let mut metrics = Vec::new();
    while trainer.step_index() < end {
        let row = trainer.step()?;
        if row.step % 100 == 0 {
            info!(
                "step {} stage {} total {:.5} l_mtp {:.5} l_align {:.5} |g| {:.3}",
                row.step, row.stage, row.total, row.l_mtp, row.l_align, row.grad_norm
            );
        }
        if let Some(w) = writer.as_mut() {
            w.serialize(&row)?;
        }
        metrics.push(row);
        if let Some(dir) = &ckpt {
            let every = cfg.checkpoint_every;
            if every > 0 && trainer.step_index() % every == 0 {
                writer.as_mut().map(|w| w.flush()).transpose()?;
                trainer.save_checkpoint(dir)?;
            }
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = &ckpt {
        trainer.save_checkpoint(dir)?;
    }
    Ok(TrainOutcome {
        steps_done: trainer.step_index(),
        smoothness_violations: trainer.smoothness_violations(),
        params: trainer.into_params(),
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub items: usize,
    /// Mean squared error over garment-region pixels of the target.
    pub masked_mse: f64,
    /// Mean over items of the cosine between masked generated and masked
    /// ground-truth images.
    pub masked_cosine: f64,
    pub full_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: BTreeMap<String, TaskMetrics>,
    /// Masked MSE of the try-off task, whose target is the garment image.
    pub tryoff_garment_mse: Option<f64>,
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl EvalReport {
    pub fn task(&self, task: Task) -> Option<&TaskMetrics> {
        self.tasks.get(task.name())
    }
}

/// Metrics of `generated` against the instances' targets.
pub fn score(instances: &[TaskInstance], generated: &[Image]) -> Result<TaskMetrics> {
    if instances.len() != generated.len() || instances.is_empty() {
        return Err(invalid("need one generated image per instance"));
    }
    let (mut sq_in, mut n_in, mut sq_all, mut n_all) = (0.0, 0usize, 0.0, 0usize);
    let (mut cos_sum, mut cos_n) = (0.0, 0usize);
    for (inst, gen) in instances.iter().zip(generated) {
        if gen.shape() != inst.target.shape() {
            return Err(invalid("generated image shape differs from target"));
        }
        let mask = inst.mask.to_tensor::<f64>();
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for ((&g, &t), &m) in gen.data().iter().zip(inst.target.data()).zip(mask.data()) {
            let d = (g - t) * (g - t);
            sq_all += d;
            n_all += 1;
            if m != 0.0 {
                sq_in += d;
                n_in += 1;
                dot += g * t;
                na += g * g;
                nb += t * t;
            }
        }
        if na > 0.0 && nb > 0.0 {
            cos_sum += dot / (na.sqrt() * nb.sqrt());
            cos_n += 1;
        }
    }
    Ok(TaskMetrics {
        items: instances.len(),
        masked_mse: if n_in > 0 { sq_in / n_in as f64 } else { 0.0 },
        masked_cosine: if cos_n > 0 { cos_sum / cos_n as f64 } else { 0.0 },
        full_mse: sq_all / n_all as f64,
    })
}

/// Evaluates an arbitrary generator on every `task` over `eval`. The
/// generator receives instances plus their dataset indices.
pub fn evaluate_with(
    eval: &Dataset,
    tasks: &[Task],
    cfg: &SampleConfig,
    generate: &mut dyn FnMut(&[TaskInstance], &[usize]) -> Result<Vec<Image>>,
) -> Result<EvalReport> {
    if eval.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let indices: Vec<usize> = (0..eval.len()).collect();
    let mut out = BTreeMap::new();
    for &task in tasks {
        let instances: Vec<TaskInstance> = eval.items.iter().map(|t| make_task(t, task)).collect();
        let generated = generate(&instances, &indices)?;
        out.insert(task.name().to_string(), score(&instances, &generated)?);
    }
    Ok(EvalReport {
        tryoff_garment_mse: out.get(Task::Tryoff.name()).map(|m: &TaskMetrics| m.masked_mse),
        tasks: out,
        steps: cfg.steps,
        guidance: cfg.guidance,
        seed: cfg.seed,
    })
}

/// Guided samples for `instances`, batched in chunks. Item `i`'s noise
/// depends only on `(cfg.seed, indices[i])`.
pub fn generate<F: Float>(
    model: &ToyDiT<F>,
    instances: &[TaskInstance],
    indices: &[usize],
    cfg: &SampleConfig,
) -> Result<Vec<Image>> {
    cfg.validate()?;
    let shape = model.config().image_shape();
    let mut out = Vec::with_capacity(instances.len());
    for (chunk, idx) in instances.chunks(EVAL_CHUNK).zip(indices.chunks(EVAL_CHUNK)) {
        let refs = chunk[0].conditions.len();
        if chunk.iter().any(|c| c.conditions.len() != refs) {
            return Err(invalid("instances in one call must share a reference count"));
        }
        let conditions = (0..refs)
            .map(|r| Tensor::stack(&chunk.iter().map(|c| c.conditions[r].cast::<F>()).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let text = chunk.iter().map(|c| c.text_ids.clone()).collect();
        let noise: Vec<Tensor<F>> = idx
            .iter()
            .map(|&i| normal(&mut stream(cfg.seed, child_id(EVAL_NOISE, i as u64)), &shape))
            .collect();
        let field = ConditionedModel::new(model, conditions, text);
        let res = integrate(&field, &Tensor::stack(&noise)?, cfg.steps, cfg.guidance, false)?;
        for i in 0..chunk.len() {
            out.push(res.image.slice_leading(i)?.cast());
        }
    }
    Ok(out)
}

/// Samples every task on `eval` with `model` and scores the results.
pub fn evaluate<F: Float>(model: &ToyDiT<F>, eval: &Dataset, tasks: &[Task], cfg: &SampleConfig) -> Result<EvalReport> {
    if eval.image_size != model.config().image_size {
        return Err(invalid("evaluation images do not match the model resolution"));
    }
    evaluate_with(eval, tasks, cfg, &mut |inst, idx| generate(model, inst, idx, cfg))
}
