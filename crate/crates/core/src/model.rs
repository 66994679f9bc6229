//! Toy diffusion transformer `v(x_t, t, c)` over pixel patches.
//!
//! Text tokens, noisy patches and reference patches form one sequence. Every
//! block applies timestep-modulated attention (under the windowed mask) and an
//! MLP; the output is read back from the noisy slots only.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::attention::{attend_graph, build_mask, plan_windows, Parity};
use crate::data::vocab;
use crate::error::{invalid, Error, Result};
use crate::layout::{assign_positions, rope_tables, AxisSplit, Grid, RopeTables, TokenSequence};
use crate::numerics::rng::{normal, stream, truncated_normal};
use crate::numerics::{odt, Float, Graph, RowPattern, Tensor, Var};

/// Width of the sinusoidal timestep features.
pub const TIME_FREQ: usize = 32;
const TIME_SCALE: f64 = 1000.0;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub depth: usize,
    pub window_size: usize,
    pub text_vocab: usize,
    pub axis_split: Option<AxisSplit>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            patch: 2,
            dim: 64,
            heads: 4,
            head_dim: 16,
            depth: 4,
            window_size: 4,
            text_vocab: vocab::SIZE,
            axis_split: None,
        }
    }
}

impl ModelConfig {
    /// `dim = heads * head_dim` with the other fields at their defaults.
    pub fn with_width(dim: usize, heads: usize) -> Self {
        Self {
            dim,
            heads,
            head_dim: dim / heads.max(1),
            ..Self::default()
        }
    }

    /// 4×4 images, dim 8, two heads, two blocks: small enough for
    /// exhaustive finite differences.
    pub fn tiny() -> Self {
        Self {
            image_size: 4,
            dim: 8,
            heads: 2,
            head_dim: 4,
            depth: 2,
            window_size: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(invalid(m));
        if self.heads == 0 || self.dim != self.heads * self.head_dim {
            return fail(format!("dim {} != heads {} × head_dim {}", self.dim, self.heads, self.head_dim));
        }
        if self.depth == 0 || self.depth % 2 != 0 {
            return fail(format!("depth {} must be even and positive", self.depth));
        }
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return fail(format!("image size {} not divisible by patch {}", self.image_size, self.patch));
        }
        if self.channels == 0 || self.window_size == 0 {
            return fail("channels and window size must be positive".into());
        }
        self.split().map(|_| ())
    }

    pub fn split(&self) -> Result<AxisSplit> {
        match self.axis_split {
            Some(s) => {
                s.validate(self.head_dim)?;
                Ok(s)
            }
            None => AxisSplit::for_head_dim(self.head_dim),
        }
    }

    /// Patch-grid extent per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Embedding,
    Block(usize),
    Final,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
    init: Init,
}

/// Linear layers of a block, in storage order.
const BLOCK_LINEARS: [(&str, Init); 12] = [
    ("attn.q", Init::Normal),
    ("attn.k", Init::Normal),
    ("attn.v", Init::Normal),
    ("attn.out", Init::Normal),
    ("mlp.fc1", Init::Normal),
    ("mlp.fc2", Init::Normal),
    ("mod.attn_shift", Init::Normal),
    ("mod.attn_scale", Init::Normal),
    ("mod.attn_gate", Init::Zero),
    ("mod.mlp_shift", Init::Normal),
    ("mod.mlp_scale", Init::Normal),
    ("mod.mlp_gate", Init::Zero),
];

/// Every parameter tensor in storage order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.dim;
    let mut specs = Vec::new();
    let mut linear = |name: String, fan_in: usize, fan_out: usize, group: Group, init: Init| {
        specs.push(ParamSpec {
            name: format!("{name}.w"),
            shape: vec![fan_in, fan_out],
            group,
            init,
        });
        specs.push(ParamSpec {
            name: format!("{name}.b"),
            shape: vec![fan_out],
            group,
            init: Init::Zero,
        });
    };
    linear("patch_embed".into(), cfg.patch_dim(), d, Group::Embedding, Init::Normal);
    linear("time.fc1".into(), TIME_FREQ, d, Group::Embedding, Init::Normal);
    linear("time.fc2".into(), d, d, Group::Embedding, Init::Normal);
    for b in 0..cfg.depth {
        for (name, init) in BLOCK_LINEARS {
            let (fan_in, fan_out) = match name {
                "mlp.fc1" => (d, 4 * d),
                "mlp.fc2" => (4 * d, d),
                _ => (d, d),
            };
            linear(format!("blocks.{b}.{name}"), fan_in, fan_out, Group::Block(b), init);
        }
    }
    linear("final.shift".into(), d, d, Group::Final, Init::Normal);
    linear("final.scale".into(), d, d, Group::Final, Init::Normal);
    linear("final.out".into(), d, cfg.patch_dim(), Group::Final, Init::Zero);
    if cfg.text_vocab > 0 {
        specs.push(ParamSpec {
            name: "text_embed".into(),
            shape: vec![cfg.text_vocab, d],
            group: Group::Embedding,
            init: Init::Normal,
        });
    }
    specs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub embedding: usize,
    pub blocks: usize,
    pub final_layer: usize,
    pub total: usize,
}

/// Closed-form parameter count.
pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let (d, p) = (cfg.dim, cfg.patch_dim());
    let embedding = p * d + d + TIME_FREQ * d + d + d * d + d + cfg.text_vocab * d;
    // 10 square linears plus a 4× MLP.
    let per_block = 10 * (d * d + d) + (4 * d * d + 4 * d) + (4 * d * d + d);
    let blocks = cfg.depth * per_block;
    let final_layer = 2 * (d * d + d) + d * p + p;
    ParamCount {
        embedding,
        blocks,
        final_layer,
        total: embedding + blocks + final_layer,
    }
}

/// Named parameter tensors of the toy network.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDiTParams<F: Float> {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Float> ToyDiTParams<F> {
    /// Truncated-normal weights (σ = 0.02), zero biases, zero gates and
    /// output projection.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(config);
        let mut rng = stream(seed, 0x696e_6974);
        let tensors = specs
            .iter()
            .map(|s| match s.init {
                Init::Normal => truncated_normal(&mut rng, &s.shape, INIT_STD),
                Init::Zero => Tensor::zeros(&s.shape),
            })
            .collect();
        Ok(Self::assemble(config, specs, tensors))
    }

    /// Every tensor (biases and gates included) drawn from `N(0, std²)`.
    /// Used where the zero-initialized paths would hide a bug.
    pub fn init_random(config: &ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(config);
        let mut rng = stream(seed, 0x7261_6e64);
        let tensors = specs
            .iter()
            .map(|s| normal::<F>(&mut rng, &s.shape).map(|x| x * F::of(std)))
            .collect();
        Ok(Self::assemble(config, specs, tensors))
    }

    fn assemble(config: &ModelConfig, specs: Vec<ParamSpec>, tensors: Vec<Tensor<F>>) -> Self {
        Self {
            config: config.clone(),
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors,
        }
    }

    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(config);
        if specs.len() != tensors.len() {
            return Err(invalid(format!("expected {} tensors, got {}", specs.len(), tensors.len())));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::Shape {
                    op: "params",
                    lhs: s.shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(Self::assemble(config, specs, tensors))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<G: Float>(&self) -> ToyDiTParams<G> {
        ToyDiTParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Euclidean distance over all parameters.
    pub fn distance(&self, other: &Self) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// `config.json` plus one ODT1 file per tensor.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)?)?;
        for (n, t) in self.names.iter().zip(&self.tensors) {
            odt::save(dir.join(format!("{n}.odt")), t)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
        let tensors = param_specs(&config)
            .iter()
            .map(|s| odt::load(dir.join(format!("{}.odt", s.name))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(&config, tensors)
    }
}

/// Graph handles of bound parameters, in storage order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub vars: Vec<Var>,
}

impl ParamVars {
    pub fn bind<F: Float>(g: &mut Graph<F>, params: &ToyDiTParams<F>, trainable: bool) -> Self {
        Self {
            vars: params.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect(),
        }
    }
}

/// Index tables and masks for one (reference count, prompt length, batch)
/// layout. Samples are stacked along rows.
#[derive(Debug)]
pub struct SequencePlan<F> {
    pub seq: TokenSequence,
    pub batch: usize,
    pub refs: usize,
    pub text_len: usize,
    rope: RopeTables<F>,
    patterns: [Arc<RowPattern>; 2],
    sample_rows: Arc<[usize]>,
    arrange: Arc<[usize]>,
    patch_index: Arc<[usize]>,
    unpatch_index: Arc<[usize]>,
}

impl<F: Float> SequencePlan<F> {
    pub fn new(cfg: &ModelConfig, refs: usize, text_len: usize, batch: usize) -> Result<Self> {
        cfg.validate()?;
        if batch == 0 {
            return Err(invalid("batch must be at least 1"));
        }
        if refs == 0 && text_len == 0 {
            return Err(invalid("sequence needs text tokens or at least one condition"));
        }
        let gs = cfg.grid();
        let grid = Grid::new(gs, gs);
        let seq = assign_positions(grid, &vec![grid; refs], text_len)?;
        let len = seq.total_len();
        let n = gs * gs;
        let (c, s, p, pd) = (cfg.channels, cfg.image_size, cfg.patch, cfg.patch_dim());

        let one = rope_tables::<F>(&seq, cfg.head_dim, cfg.split()?)?;
        let rope = RopeTables::concat(&vec![&one; batch]);
        let pattern = |parity| -> Result<Arc<RowPattern>> {
            let plan = plan_windows(&seq, cfg.window_size, parity)?;
            let mask = build_mask(&seq, &plan)?;
            let p = mask.pattern().clone();
            Ok(if batch == 1 {
                p
            } else {
                Arc::new(RowPattern::block_diag(&vec![p.as_ref(); batch]))
            })
        };
        let patterns = [pattern(Parity::Regular)?, pattern(Parity::Shifted)?];

        let sample_rows: Vec<usize> = (0..batch).flat_map(|b| std::iter::repeat_n(b, len)).collect();

        // Source rows: text of every sample, then patches of image m = r·B + b.
        let text_rows = batch * text_len;
        let mut arrange = Vec::with_capacity(batch * len);
        for b in 0..batch {
            arrange.extend((0..text_len).map(|j| b * text_len + j));
            for r in 0..=refs {
                let m = r * batch + b;
                arrange.extend((0..n).map(|tok| text_rows + m * n + tok));
            }
        }

        let mut patch_index = Vec::with_capacity((refs + 1) * batch * n * pd);
        for m in 0..(refs + 1) * batch {
            for py in 0..gs {
                for px in 0..gs {
                    for ch in 0..c {
                        for dy in 0..p {
                            for dx in 0..p {
                                patch_index.push(m * c * s * s + ch * s * s + (py * p + dy) * s + px * p + dx);
                            }
                        }
                    }
                }
            }
        }

        let mut unpatch_index = Vec::with_capacity(batch * c * s * s);
        for b in 0..batch {
            for ch in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        let row = b * len + text_len + (y / p) * gs + x / p;
                        let col = ch * p * p + (y % p) * p + x % p;
                        unpatch_index.push(row * pd + col);
                    }
                }
            }
        }

        Ok(Self {
            seq,
            batch,
            refs,
            text_len,
            rope,
            patterns,
            sample_rows: sample_rows.into(),
            arrange: arrange.into(),
            patch_index: patch_index.into(),
            unpatch_index: unpatch_index.into(),
        })
    }

    /// Rows of the stacked hidden state.
    pub fn rows(&self) -> usize {
        self.batch * self.seq.total_len()
    }

    pub fn pattern(&self, layer: usize) -> &Arc<RowPattern> {
        match Parity::for_layer(layer) {
            Parity::Regular => &self.patterns[0],
            Parity::Shifted => &self.patterns[1],
        }
    }
}

/// Output and per-depth hidden states (`hidden[0]` is the embedded input).
pub struct Forward {
    pub output: Var,
    pub hidden: Vec<Var>,
}

pub fn timestep_features<F: Float>(t: &[f64]) -> Tensor<F> {
    let half = TIME_FREQ / 2;
    let mut data = Vec::with_capacity(t.len() * TIME_FREQ);
    for &ti in t {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| ti * TIME_SCALE * f).collect();
        data.extend(args.iter().map(|a| F::of(a.cos())));
        data.extend(args.iter().map(|a| F::of(a.sin())));
    }
    Tensor::new(vec![t.len(), TIME_FREQ], data).expect("timestep shape")
}

fn linear<F: Float>(g: &mut Graph<F>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn modulate<F: Float>(g: &mut Graph<F>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.layernorm(x, None, None)?;
    let s = g.offset(scale, F::one())?;
    let m = g.mul(n, s)?;
    g.add(m, shift)
}

struct Cursor<'a>(std::slice::Iter<'a, Var>);

impl Cursor<'_> {
    fn one(&mut self) -> Var {
        *self.0.next().expect("parameter layout")
    }

    fn linear(&mut self) -> (Var, Var) {
        (self.one(), self.one())
    }
}

/// Records one forward pass.
///
/// `x` and each condition are `[B, C, H, W]` nodes; `t` holds one time per
/// sample and `text_ids` the `B * text_len` prompt tokens sample-major.
#[allow(clippy::too_many_arguments)]
pub fn forward_graph<F: Float>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    pv: &ParamVars,
    plan: &SequencePlan<F>,
    x: Var,
    t: &[f64],
    conditions: &[Var],
    text_ids: &[usize],
) -> Result<Forward> {
    let (b, n) = (plan.batch, cfg.grid() * cfg.grid());
    let image = [b, cfg.channels, cfg.image_size, cfg.image_size];
    for &v in std::iter::once(&x).chain(conditions) {
        if g.shape(v) != image {
            return Err(Error::Shape {
                op: "forward",
                lhs: image.to_vec(),
                rhs: g.shape(v).to_vec(),
            });
        }
    }
    if t.len() != b || conditions.len() != plan.refs || text_ids.len() != b * plan.text_len {
        return Err(invalid(format!(
            "forward expects {b} times, {} conditions and {} text ids; got {}, {}, {}",
            plan.refs,
            b * plan.text_len,
            t.len(),
            conditions.len(),
            text_ids.len()
        )));
    }
    if let Some(bad) = text_ids.iter().find(|&&i| i >= cfg.text_vocab) {
        return Err(invalid(format!("text id {bad} outside vocabulary of {}", cfg.text_vocab)));
    }

    let mut p = Cursor(pv.vars.iter());
    let patch_embed = p.linear();
    let time1 = p.linear();
    let time2 = p.linear();

    let mut images = vec![x];
    images.extend_from_slice(conditions);
    let stacked = g.concat(&images)?;
    let patches = g.gather(stacked, plan.patch_index.clone(), &[images.len() * b * n, cfg.patch_dim()])?;
    let tokens = linear(g, patches, patch_embed)?;

    let temb = g.constant(timestep_features(t));
    let c = linear(g, temb, time1)?;
    let c = g.silu(c)?;
    let c = linear(g, c, time2)?;
    let c = g.silu(c)?;
    let per_token = |g: &mut Graph<F>, lin: (Var, Var)| -> Result<Var> {
        let m = linear(g, c, lin)?;
        g.gather_rows(m, plan.sample_rows.clone())
    };

    let mut blocks = Vec::with_capacity(cfg.depth);
    for _ in 0..cfg.depth {
        blocks.push([(); 12].map(|_| p.linear()));
    }
    let final_shift = p.linear();
    let final_scale = p.linear();
    let final_out = p.linear();

    let all = if plan.text_len > 0 {
        let table = p.one();
        let te = g.gather_rows(table, text_ids.to_vec().into())?;
        g.concat(&[te, tokens])?
    } else {
        tokens
    };
    let mut h = g.gather_rows(all, plan.arrange.clone())?;
    let mut hidden = vec![h];

    for (layer, [q, k, v, out, fc1, fc2, sh1, sc1, ga1, sh2, sc2, ga2]) in blocks.into_iter().enumerate() {
        let (shift, scale, gate) = (per_token(g, sh1)?, per_token(g, sc1)?, per_token(g, ga1)?);
        let a = modulate(g, h, shift, scale)?;
        let qkv = (linear(g, a, q)?, linear(g, a, k)?, linear(g, a, v)?);
        let att = attend_graph(g, qkv, plan.pattern(layer), Some(&plan.rope), cfg.heads)?;
        let o = linear(g, att, out)?;
        let o = g.mul(gate, o)?;
        h = g.add(h, o)?;

        let (shift, scale, gate) = (per_token(g, sh2)?, per_token(g, sc2)?, per_token(g, ga2)?);
        let m = modulate(g, h, shift, scale)?;
        let m = linear(g, m, fc1)?;
        let m = g.gelu(m)?;
        let m = linear(g, m, fc2)?;
        let m = g.mul(gate, m)?;
        h = g.add(h, m)?;
        hidden.push(h);
    }

    let (shift, scale) = (per_token(g, final_shift)?, per_token(g, final_scale)?);
    let f = modulate(g, h, shift, scale)?;
    let f = linear(g, f, final_out)?;
    let output = g.gather(f, plan.unpatch_index.clone(), &image)?;
    Ok(Forward { output, hidden })
}

type PlanKey = (usize, usize, usize);

/// Parameters plus a cache of sequence plans; evaluates the network without
/// recording gradients.
#[derive(Debug)]
pub struct ToyDiT<F: Float> {
    pub params: ToyDiTParams<F>,
    plans: Mutex<HashMap<PlanKey, Arc<SequencePlan<F>>>>,
}

impl<F: Float> Clone for ToyDiT<F> {
    fn clone(&self) -> Self {
        Self::new(self.params.clone())
    }
}

impl<F: Float> ToyDiT<F> {
    pub fn new(params: ToyDiTParams<F>) -> Self {
        Self {
            params,
            plans: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn plan(&self, refs: usize, text_len: usize, batch: usize) -> Result<Arc<SequencePlan<F>>> {
        let mut plans = self.plans.lock().expect("plan cache poisoned");
        if let Some(p) = plans.get(&(refs, text_len, batch)) {
            return Ok(p.clone());
        }
        let p = Arc::new(SequencePlan::new(&self.params.config, refs, text_len, batch)?);
        plans.insert((refs, text_len, batch), p.clone());
        Ok(p)
    }

    /// Batched velocity. `x` and conditions are `[B, C, H, W]`; `text_ids`
    /// holds one equal-length prompt per sample.
    pub fn velocity_batch(
        &self,
        x: &Tensor<F>,
        t: &[f64],
        conditions: &[Tensor<F>],
        text_ids: &[Vec<usize>],
    ) -> Result<Tensor<F>> {
        let b = x.shape()[0];
        let text_len = text_ids.first().map_or(0, Vec::len);
        if text_ids.len() != b || text_ids.iter().any(|ids| ids.len() != text_len) {
            return Err(invalid("need one equal-length prompt per sample"));
        }
        let plan = self.plan(conditions.len(), text_len, b)?;
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, &self.params, false);
        let xv = g.constant(x.clone());
        let cv: Vec<Var> = conditions.iter().map(|c| g.constant(c.clone())).collect();
        let flat: Vec<usize> = text_ids.concat();
        let out = forward_graph(&mut g, &self.params.config, &pv, &plan, xv, t, &cv, &flat)?;
        Ok(g.value(out.output).clone())
    }

    /// Velocity for a single `[C, H, W]` image.
    pub fn forward(&self, x: &Tensor<F>, t: f64, conditions: &[Tensor<F>], text_ids: &[usize]) -> Result<Tensor<F>> {
        let lift = |img: &Tensor<F>| {
            let mut s = vec![1];
            s.extend_from_slice(img.shape());
            img.clone().reshape(&s)
        };
        let xb = lift(x)?;
        let cb = conditions.iter().map(lift).collect::<Result<Vec<_>>>()?;
        let v = self.velocity_batch(&xb, &[t], &cb, &[text_ids.to_vec()])?;
        v.reshape(x.shape())
    }
}

/// Human-readable parameter and layer table.
pub fn describe(cfg: &ModelConfig) -> Result<String> {
    use std::fmt::Write;
    cfg.validate()?;
    let count = count_params(cfg);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "image {0}x{0}x{1}, patch {2}, dim {3}, heads {4}x{5}, depth {6}, window {7}",
        cfg.image_size, cfg.channels, cfg.patch, cfg.dim, cfg.heads, cfg.head_dim, cfg.depth, cfg.window_size
    );
    let _ = writeln!(
        s,
        "params: total {} (embedding {}, blocks {}, final {})",
        count.total, count.embedding, count.blocks, count.final_layer
    );
    let gs = cfg.grid();
    let seq = assign_positions(Grid::new(gs, gs), &[Grid::new(gs, gs)], vocab::PROMPT_LEN)?;
    let _ = writeln!(s, "{:<6} {:<8} {:>8} {:>10}", "layer", "parity", "windows", "params");
    for layer in 0..cfg.depth {
        let parity = Parity::for_layer(layer);
        let plan = plan_windows(&seq, cfg.window_size, parity)?;
        let _ = writeln!(
            s,
            "{:<6} {:<8} {:>8} {:>10}",
            layer,
            format!("{parity:?}").to_lowercase(),
            plan.window_count(),
            count.blocks / cfg.depth
        );
    }
    for spec in param_specs(cfg) {
        let _ = writeln!(s, "  {:<28} {:?}", spec.name, spec.shape);
    }
    Ok(s)
}
