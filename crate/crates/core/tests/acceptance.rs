//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,5,12` restricts the run to the listed criteria. The
//! trained toy model from criterion 11 is shared with criteria 7 and 8; when
//! 11 is skipped they train it themselves.

mod common;

use std::collections::HashSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use tryon_dit::analysis::{
    compare_alignment, compare_ssp_mtp, error_vs_dt, measure_smoothness, model_error_curve, CompareConfig,
    ErrorReference, LipschitzConfig,
};
use tryon_dit::attention::{attend, attend_dense, build_mask, flops, plan_windows, Parity};
use tryon_dit::bench::{bench_attention, AttnBenchConfig};
use tryon_dit::data::{Dataset, Task};
use tryon_dit::layout::{assign_positions, Grid, SegmentTag, TokenSequence};
use tryon_dit::model::{forward_graph, ModelConfig, ParamVars, SequencePlan, ToyDiT, ToyDiTParams};
use tryon_dit::numerics::rng::{normal, stream};
use tryon_dit::numerics::{Graph, RowPattern, Tensor, Var};
use tryon_dit::objective::{mtp_loss, ssp_loss, FlowSample, ModelField, OracleField};
use tryon_dit::sampler::{FnField, SampleConfig};
use tryon_dit::trainer::{evaluate, train, DataConfig, TrainConfig, TrainOptions};
use tryon_dit::Result;

use common::{fd_max_rel_err, model_fd, probe, rand};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

// ---------------------------------------------------------------- 1

type OpFn = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn op_table() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    fn v(s: &[&[usize]]) -> Vec<Vec<usize>> {
        s.iter().map(|x| x.to_vec()).collect()
    }
    vec![
        ("matmul", v(&[&[3, 4], &[4, 5]]), |g, x| g.matmul(x[0], x[1])),
        ("add", v(&[&[3, 4], &[1, 4]]), |g, x| g.add(x[0], x[1])),
        ("sub", v(&[&[4], &[2, 4]]), |g, x| g.sub(x[0], x[1])),
        ("mul", v(&[&[3, 4], &[4]]), |g, x| g.mul(x[0], x[1])),
        ("scale", v(&[&[5]]), |g, x| g.scale(x[0], -1.7)),
        ("offset", v(&[&[5]]), |g, x| g.offset(x[0], 0.3)),
        ("square", v(&[&[2, 3]]), |g, x| g.square(x[0])),
        ("sum", v(&[&[2, 3]]), |g, x| g.sum(x[0])),
        ("mean", v(&[&[2, 3]]), |g, x| g.mean(x[0])),
        ("gelu", v(&[&[7]]), |g, x| g.gelu(x[0])),
        ("silu", v(&[&[7]]), |g, x| g.silu(x[0])),
        ("reshape", v(&[&[2, 3]]), |g, x| g.reshape(x[0], &[3, 2])),
        ("layernorm", v(&[&[3, 6]]), |g, x| g.layernorm(x[0], None, None)),
        ("layernorm_affine", v(&[&[3, 6], &[6], &[1, 6]]), |g, x| {
            g.layernorm(x[0], Some(x[1]), Some(x[2]))
        }),
        ("cosine_similarity", v(&[&[6], &[2, 3]]), |g, x| g.cosine_similarity(x[0], x[1])),
        ("softmax", v(&[&[3, 5]]), |g, x| g.softmax(x[0], None)),
        ("softmax_masked", v(&[&[2, 3]]), |g, x| {
            g.softmax(x[0], Some(&[true, false, true, true, true, false]))
        }),
        ("gather", v(&[&[2, 3]]), |g, x| g.gather(x[0], Arc::from(vec![5usize, 0, 0, 3]), &[2, 2])),
        ("gather_rows", v(&[&[3, 2]]), |g, x| g.gather_rows(x[0], Arc::from(vec![2usize, 2, 0]))),
        ("concat", v(&[&[1, 3], &[2, 3]]), |g, x| g.concat(&[x[0], x[1], x[0]])),
        ("rotate_pairs", v(&[&[3, 8]]), |g, x| {
            let angles: Vec<f64> = (0..6).map(|i| 0.37 * i as f64).collect();
            let cos: Arc<[f64]> = angles.iter().map(|a| a.cos()).collect();
            let sin: Arc<[f64]> = angles.iter().map(|a| a.sin()).collect();
            g.rotate_pairs(x[0], cos, sin, 4)
        }),
        ("sparse_attention", v(&[&[4, 6], &[4, 6], &[4, 6]]), |g, x| {
            let rows = vec![vec![0, 1, 2, 3], vec![1], vec![0, 2, 3], vec![2, 3]];
            let pattern = Arc::new(RowPattern::from_rows(&rows, 4)?);
            g.sparse_attention(x[0], x[1], x[2], pattern, 2)
        }),
    ]
}

fn criterion_1() -> Result<Verdict> {
    const SEEDS: u64 = 100;
    let mut worst_op = (0.0f64, "");
    for (name, shapes, op) in op_table() {
        for seed in 0..SEEDS {
            let inputs: Vec<Tensor<f64>> = shapes.iter().enumerate().map(|(i, s)| rand(seed, i as u64, s)).collect();
            let build = move |g: &mut Graph<f64>, v: &[Var]| {
                let y = op(g, v)?;
                probe(g, y, seed)
            };
            let err = fd_max_rel_err(&build, &inputs, 1e-5)?;
            if err > worst_op.0 {
                worst_op = (err, name);
            }
        }
    }
    let cfg = ModelConfig::tiny();
    let mut worst_model = model_fd(&cfg, 0, None)?;
    for seed in 1..SEEDS {
        worst_model = worst_model.max(model_fd(&cfg, seed, Some(2))?);
    }
    verdict(
        worst_op.0 < 1e-5 && worst_model < 1e-4,
        format!(
            "{} ops x {SEEDS} seeds: worst rel err {:.2e} ({}) < 1e-5; model x {SEEDS} seeds: {:.2e} < 1e-4",
            op_table().len(),
            worst_op.0,
            worst_op.1,
            worst_model
        ),
    )
}

// ---------------------------------------------------------------- 2

fn random_sequence(rng: &mut impl Rng, max_side: usize, max_refs: usize) -> Result<TokenSequence> {
    let n = rng.random_range(1..=max_refs);
    let mut grids: Vec<Grid> = (0..=n)
        .map(|_| Grid::new(rng.random_range(1..=max_side), rng.random_range(1..=max_side)))
        .collect();
    let noisy = grids.remove(0);
    let refs = grids;
    assign_positions(noisy, &refs, rng.random_range(0..4))
}

fn criterion_2() -> Result<Verdict> {
    let mut rng = stream(2, 0);
    let (mut identical, mut dense_gap) = (0, 0.0f64);
    const CONFIGS: usize = 200;
    for c in 0..CONFIGS {
        let seq = random_sequence(&mut rng, 10, 3)?;
        let extent = seq
            .references()
            .iter()
            .filter_map(|s| s.grid())
            .map(|g| g.w.max(g.h))
            .max()
            .expect("references");
        let m = extent + rng.random_range(0..3);
        let parity = if c % 2 == 0 { Parity::Regular } else { Parity::Shifted };
        let windowed = build_mask(&seq, &plan_windows(&seq, m, parity)?)?;
        // Rule oracle: denoising rows see everything, reference rows see
        // exactly their own image.
        let mut rules = true;
        for q in 0..seq.total_len() {
            for k in 0..seq.total_len() {
                let want = match seq.tags[q] {
                    SegmentTag::Reference(i) => seq.tags[k] == SegmentTag::Reference(i),
                    _ => true,
                };
                rules &= windowed.allowed(q, k) == want;
            }
        }
        let full = build_mask(&seq, &plan_windows(&seq, usize::MAX / 4, parity)?)?;
        let heads = rng.random_range(1..=2);
        let d = 2 * rng.random_range(1..=4);
        let shape = [heads, seq.total_len(), d];
        let mut s = stream(2, 1 + c as u64);
        let (q, k, v): (Tensor<f64>, Tensor<f64>, Tensor<f64>) =
            (normal(&mut s, &shape), normal(&mut s, &shape), normal(&mut s, &shape));
        let a = attend(&q, &k, &v, &windowed, None)?;
        let b = attend(&q, &k, &v, &full, None)?;
        let bitwise = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        dense_gap = dense_gap.max(a.max_abs_diff(&attend_dense(&q, &k, &v, &full, None)?));
        if rules && bitwise {
            identical += 1;
        }
    }
    verdict(
        identical == CONFIGS && dense_gap < 1e-12,
        format!("{identical}/{CONFIGS} configs bitwise equal to single-window attention; dense cross-check {dense_gap:.1e}"),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Result<Verdict> {
    const CONFIGS: u64 = 50;
    let mut exact = 0;
    let mut layers = 0;
    for c in 0..CONFIGS {
        let mut rng = stream(3, c);
        let heads = rng.random_range(1..=2);
        let cfg = ModelConfig {
            image_size: [4, 8][rng.random_range(0..2)],
            dim: heads * 8,
            heads,
            head_dim: 8,
            depth: 2 * rng.random_range(1..=2),
            window_size: rng.random_range(1..=4),
            ..ModelConfig::default()
        };
        let refs = rng.random_range(1..=2);
        let text_len = rng.random_range(1..=3);
        let params = ToyDiTParams::<f64>::init_random(&cfg, c, 0.3)?;
        let plan = SequencePlan::<f64>::new(&cfg, refs, text_len, 1)?;
        let shape = [1, 3, cfg.image_size, cfg.image_size];
        let conds: Vec<Tensor<f64>> = (0..refs).map(|r| rand(c, 10 + r as u64, &shape)).collect();
        let start = plan.seq.references()[0].start;
        let run = |x: &Tensor<f64>, text: &[usize]| -> Result<Vec<Vec<u64>>> {
            let mut g = Graph::new();
            let pv = ParamVars::bind(&mut g, &params, false);
            let xv = g.constant(x.clone());
            let cv: Vec<Var> = conds.iter().map(|t| g.constant(t.clone())).collect();
            let f = forward_graph(&mut g, &cfg, &pv, &plan, xv, &[0.4], &cv, text)?;
            Ok(f.hidden
                .iter()
                .map(|&h| g.value(h).data()[start * cfg.dim..].iter().map(|v| v.to_bits()).collect())
                .collect())
        };
        let text_a: Vec<usize> = (0..text_len).map(|_| rng.random_range(0..cfg.text_vocab)).collect();
        let text_b: Vec<usize> = text_a.iter().map(|t| (t + 1) % cfg.text_vocab).collect();
        let base = run(&rand(c, 1, &shape), &text_a)?;
        let moved = run(&rand(c, 2, &shape), &text_b)?;
        layers += base.len();
        if base == moved {
            exact += 1;
        }
    }
    verdict(
        exact == CONFIGS,
        format!("{exact}/{CONFIGS} configs with bitwise-unchanged reference states ({layers} layer outputs compared)"),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Result<Verdict> {
    const CONFIGS: usize = 1000;
    let mut rng = stream(4, 0);
    let (mut clean, mut fractional) = (0, 0);
    for _ in 0..CONFIGS {
        let seq = random_sequence(&mut rng, 12, 4)?;
        let noisy = seq.noisy_grid();
        if seq
            .references()
            .iter()
            .filter_map(|s| s.grid())
            .any(|g| noisy.w % g.w != 0 || noisy.h % g.h != 0)
        {
            fractional += 1;
        }
        let mut seen = HashSet::new();
        let ok = seq
            .positions
            .iter()
            .zip(&seq.tags)
            .filter(|(_, t)| **t != SegmentTag::Text)
            .all(|(p, _)| seen.insert(*p));
        clean += ok as usize;
    }
    verdict(
        clean == CONFIGS && fractional > 0,
        format!("{clean}/{CONFIGS} layouts collision-free ({fractional} with fractional scaling)"),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Result<Verdict> {
    let window = 16;
    let sizes = [256usize, 512, 1024, 2048, 4096, 8192];
    let mut costs = Vec::new();
    for &n in &sizes {
        let seq = assign_positions(Grid::new(8, 8), &[tryon_dit::bench::grid_for(n)?], 0)?;
        costs.push(flops(&seq, &plan_windows(&seq, window, Parity::Regular)?, 1, 16).condition_windowed);
    }
    let doubling = costs.windows(2).all(|w| w[1] == 2 * w[0]);
    let rows = bench_attention(&AttnBenchConfig {
        ref_tokens: vec![4096, 8192],
        window,
        repeats: 3,
        ..AttnBenchConfig::default()
    })?;
    let faster = rows.iter().all(|r| r.time_windowed_ns < r.time_full_ns);
    let timing: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{} tokens {:.1} ms vs {:.1} ms",
                r.ref_tokens,
                r.time_windowed_ns as f64 / 1e6,
                r.time_full_ns as f64 / 1e6
            )
        })
        .collect();
    verdict(
        doubling && faster,
        format!("flops {costs:?} double exactly: {doubling}; windowed faster: {}", timing.join(", ")),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Result<Verdict> {
    let cfg = ModelConfig {
        dim: 16,
        heads: 2,
        head_dim: 8,
        depth: 2,
        ..ModelConfig::default()
    };
    let mut bitwise = 0;
    const SEEDS: u64 = 10;
    for seed in 0..SEEDS {
        let params = ToyDiTParams::<f64>::init_random(&cfg, seed, 0.2)?;
        let sample = common::model_sample(&cfg, seed)?;
        let plan = SequencePlan::new(&cfg, 2, 3, 2)?;
        let eval = |use_mtp: bool| -> Result<u64> {
            let mut g = Graph::new();
            let pv = ParamVars::bind(&mut g, &params, true);
            let conditions = sample.conditions.iter().map(|c| g.constant(c.clone())).collect();
            let field = ModelField {
                config: &cfg,
                params: &pv,
                plan: &plan,
                conditions,
                text_ids: sample.text_ids.concat(),
            };
            let l = if use_mtp {
                mtp_loss(&mut g, &field, &sample, 1, 0.03, false)?.loss
            } else {
                ssp_loss(&mut g, &field, &sample)?
            };
            Ok(g.value(l).item().to_bits())
        };
        bitwise += (eval(true)? == eval(false)?) as usize;
    }
    let mut worst_oracle = 0.0f64;
    for k in 1..=3 {
        for seed in 0..SEEDS {
            let sample: FlowSample<f64> = common::model_sample(&cfg, seed)?;
            let mut g = Graph::new();
            let field = OracleField { u: sample.u.clone() };
            let chain = mtp_loss(&mut g, &field, &sample, k, 0.03, false)?;
            worst_oracle = worst_oracle.max(g.value(chain.loss).item().abs());
        }
    }
    verdict(
        bitwise == SEEDS as usize && worst_oracle == 0.0,
        format!("K=1 bitwise equal on {bitwise}/{SEEDS} seeds; oracle loss max over K=1..3 is {worst_oracle}"),
    )
}

// ---------------------------------------------------------------- 11

/// Toy schedule for the end-to-end criterion, sized to the time budget.
fn capability_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        stages: TrainConfig::two_stage(1000, 9000, 4, 2e-3),
        data: DataConfig { seed: 0, size: 512 },
        seed: 0,
        ..TrainConfig::default()
    };
    cfg.model = ModelConfig::default();
    cfg.optim.warmup = 200;
    cfg.optim.cosine_floor = Some(0.05);
    cfg
}

const EVAL_ITEMS: usize = 16;

struct Capability {
    model: ToyDiT<f32>,
    eval: Dataset,
    train_time: Duration,
}

fn train_capability() -> Result<Capability> {
    let cfg = capability_config();
    let data = cfg.data.train_set(cfg.model.image_size)?;
    let start = Instant::now();
    let out = train::<f32>(&cfg, &data, &TrainOptions::default())?;
    Ok(Capability {
        model: ToyDiT::new(out.params),
        eval: cfg.data.eval_set(cfg.model.image_size, EVAL_ITEMS)?,
        train_time: start.elapsed(),
    })
}

fn criterion_11(cap: &Result<Capability>) -> Result<Verdict> {
    let cap = cap.as_ref().map_err(|e| tryon_dit::Error::Invalid(format!("training failed: {e}")))?;
    let cfg = capability_config();
    let sc = SampleConfig {
        steps: 30,
        guidance: 4.0,
        seed: 0,
        record_trajectory: false,
    };
    let init = ToyDiT::new(ToyDiTParams::<f32>::init(&cfg.model, cfg.seed)?);
    let before = evaluate(&init, &cap.eval, &Task::ALL, &sc)?;
    let after = evaluate(&cap.model, &cap.eval, &Task::ALL, &sc)?;
    let mse = |r: &tryon_dit::trainer::EvalReport| r.task(Task::ModelBasedTryon).map_or(f64::NAN, |m| m.masked_mse);
    let (b_vton, a_vton) = (mse(&before), mse(&after));
    let (b_off, a_off) = (
        before.tryoff_garment_mse.unwrap_or(f64::NAN),
        after.tryoff_garment_mse.unwrap_or(f64::NAN),
    );
    let all_tasks = Task::ALL.iter().all(|t| after.task(*t).is_some_and(|m| m.items == EVAL_ITEMS));
    verdict(
        a_vton * 10.0 <= b_vton && a_off * 10.0 <= b_off && all_tasks,
        format!(
            "{} steps in {:.0} s; try-on masked MSE {b_vton:.4} -> {a_vton:.4} ({:.1}x); try-off garment MSE {b_off:.4} -> {a_off:.4} ({:.1}x); 3 layouts sampled at 30 steps, g=4: {all_tasks}",
            cfg.total_steps(),
            cap.train_time.as_secs_f64(),
            b_vton / a_vton,
            b_off / a_off
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7(cap: &Result<Capability>) -> Result<Verdict> {
    let cap = cap.as_ref().map_err(|e| tryon_dit::Error::Invalid(format!("training failed: {e}")))?;
    let cfg = capability_config();
    let random = ToyDiT::new(ToyDiTParams::<f32>::init_random(&cfg.model, 7, 0.05)?);
    let (k, dt, chains) = (3, cfg.objective.dt, 500);
    let mut checked = 0;
    let mut violations = 0;
    let mut parts = Vec::new();
    for (name, model) in [("random", &random), ("trained", &cap.model)] {
        let r = measure_smoothness(model, &cap.eval, Task::ModelBasedTryon, k, dt, chains, 7)?;
        checked += r.pairs_checked;
        violations += r.violations;
        parts.push(format!("{name}: {} chains, R_smooth {:.3e}", r.samples, r.r_smooth.mean));
    }
    verdict(
        violations == 0 && checked == 2 * chains * (k - 1),
        format!("{violations} violations over {checked} adjacent pairs ({})", parts.join("; ")),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8(cap: &Result<Capability>) -> Result<Verdict> {
    let cap = cap.as_ref().map_err(|e| tryon_dit::Error::Invalid(format!("training failed: {e}")))?;
    let dts: Vec<f64> = [8.0, 16.0, 32.0, 64.0, 128.0].iter().map(|n| 1.0 / n).collect();
    let curve = model_error_curve(&cap.model, &cap.eval, Task::ModelBasedTryon, 8, &dts, 8)?;
    let slope = curve.slope.unwrap_or(f64::NAN);

    // dx/dt = x^2 integrated from t = 1 to 0 ends at x1 / (1 + x1). The
    // harness error is compared with a scalar Euler recurrence.
    let x1s = [0.2, 0.5, -0.3, 0.9];
    let x1 = Tensor::from_f64(&[4, 1], &x1s)?;
    let exact = x1.map(|v| v / (1.0 + v));
    let field = FnField(|x: &Tensor<f64>, _t: f64| x.map(|v| v * v));
    let scalar = error_vs_dt(&field, &x1, &dts, ErrorReference::Exact(exact))?;
    let mut gap = 0.0f64;
    for p in &scalar.points {
        let h = 1.0 / p.steps as f64;
        let mut err = 0.0;
        for &a in &x1s {
            let mut x = a;
            for _ in 0..p.steps {
                x -= h * x * x;
            }
            err += (x - a / (1.0 + a)).abs();
        }
        gap = gap.max((p.error - err / x1s.len() as f64).abs());
    }
    let scalar_slope = scalar.slope.unwrap_or(f64::NAN);
    verdict(
        (0.8..=1.3).contains(&slope) && gap < 1e-9,
        format!(
            "trained-model slope {slope:.3} in [0.8, 1.3] ({} reference); x^2 ODE: harness vs analytic-referenced Euler gap {gap:.1e} < 1e-9, slope {scalar_slope:.3}",
            curve.reference
        ),
    )
}

// ---------------------------------------------------------------- 9, 10

/// Shared schedule of the paired comparisons: narrower network, shorter run.
fn paired_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        stages: TrainConfig::two_stage(1200, 1800, 4, 1e-3),
        data: DataConfig { seed: 1, size: 512 },
        ..TrainConfig::default()
    };
    cfg.model = ModelConfig::with_width(32, 2);
    cfg
}

fn paired_opts() -> CompareConfig {
    CompareConfig {
        lipschitz: LipschitzConfig {
            n_pairs: 10_000,
            items: 16,
            steps: 30,
            task: Task::ModelBasedTryon,
            seed: 0,
        },
        eval_items: 16,
        ..CompareConfig::default()
    }
}

fn write_report(report: &tryon_dit::analysis::ComparisonReport, stem: &str) {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if let Err(e) = report.write(&dir, stem) {
        eprintln!("could not record {stem}: {e}");
    }
}

fn per_seed(rows: &[tryon_dit::analysis::ArmResult], value: impl Fn(&tryon_dit::analysis::ArmResult) -> Option<f64>) -> String {
    rows.iter()
        .map(|r| format!("{}:{}", r.seed, value(r).map_or("-".into(), |v| format!("{v:.4}"))))
        .collect::<Vec<_>>()
        .join(" ")
}

fn criterion_9() -> Result<Verdict> {
    let r = compare_ssp_mtp::<f32>(&paired_config(), &[0, 1, 2], &paired_opts())?;
    write_report(&r, "lipschitz_ssp_vs_mtp");
    verdict(
        r.verdict && r.excluded.is_empty(),
        format!(
            "median L_hat K=2 {:.4} < K=1 {:.4}; per seed K=1 [{}] K=2 [{}]",
            r.median_treatment.unwrap_or(f64::NAN),
            r.median_baseline.unwrap_or(f64::NAN),
            per_seed(&r.baseline, |a| a.l_hat),
            per_seed(&r.treatment, |a| a.l_hat)
        ),
    )
}

fn criterion_10() -> Result<Verdict> {
    let mut cfg = paired_config();
    cfg.objective.lambda = 0.1;
    let r = compare_alignment::<f32>(&cfg, &[0, 1, 2], &paired_opts())?;
    write_report(&r, "alignment");
    verdict(
        r.verdict && r.excluded.is_empty(),
        format!(
            "median masked cosine lambda=0.1 {:.4} > lambda=0 {:.4}; per seed lambda=0 [{}] lambda=0.1 [{}]",
            r.median_treatment.unwrap_or(f64::NAN),
            r.median_baseline.unwrap_or(f64::NAN),
            per_seed(&r.baseline, |a| a.metric),
            per_seed(&r.treatment, |a| a.metric)
        ),
    )
}

// ---------------------------------------------------------------- 12

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("readable output") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "run.json") {
                let rel = p.strip_prefix(dir).expect("inside").to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).expect("readable")));
            }
        }
    }
    out.sort();
    out
}

/// Drops the wall-clock columns, which no replay can reproduce.
fn without_timings(csv: &[u8]) -> Vec<String> {
    String::from_utf8_lossy(csv)
        .lines()
        .map(|l| l.split(',').take(4).collect::<Vec<_>>().join(","))
        .collect()
}

fn criterion_12() -> Result<Verdict> {
    let root = tempfile::tempdir()?;
    let cfg_path = root.path().join("config.json");
    let mut cfg = common::small_train_config(8, (4, 4));
    cfg.data = DataConfig { seed: 12, size: 16 };
    fs::write(&cfg_path, serde_json::to_string(&cfg)?)?;
    let cfg_s = cfg_path.to_str().expect("utf-8").to_string();
    let cli = |args: &[&str]| tryon_dit::cli::main_with_args(std::iter::once("tryon-dit").chain(args.iter().copied()));
    let train_dir = root.path().join("train");
    let ckpt = train_dir.join("checkpoint");
    let ckpt_s = ckpt.to_str().expect("utf-8").to_string();
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("gen-data", vec!["gen-data".into(), "--size".into(), "3".into(), "--images".into()]),
        ("train", vec!["--config".into(), cfg_s.clone(), "train".into()]),
        ("sample", vec!["sample".into(), "--checkpoint".into(), ckpt_s.clone(), "--count".into(), "2".into(), "--steps".into(), "5".into()]),
        ("evaluate", vec!["evaluate".into(), "--checkpoint".into(), ckpt_s.clone(), "--items".into(), "2".into(), "--steps".into(), "4".into()]),
        ("lipschitz", vec!["analyze".into(), "lipschitz".into(), "--checkpoint".into(), ckpt_s.clone(), "--pairs".into(), "200".into(), "--items".into(), "2".into(), "--steps".into(), "5".into()]),
        ("smoothness", vec!["analyze".into(), "smoothness".into(), "--checkpoint".into(), ckpt_s.clone(), "--samples".into(), "8".into(), "--items".into(), "2".into()]),
        ("errdt", vec!["analyze".into(), "errdt".into(), "--checkpoint".into(), ckpt_s.clone(), "--items".into(), "2".into(), "--dts".into(), "1/4,1/8,1/16,1/32".into()]),
        ("layout", vec!["layout".into(), "dump".into(), "--refs".into(), "8x8,3x5".into()]),
        ("model", vec!["--config".into(), cfg_s.clone(), "model".into(), "info".into()]),
        ("bench", vec!["bench".into(), "attn".into(), "--ref-tokens".into(), "64,256".into(), "--repeats".into(), "1".into()]),
    ];
    let mut same = 0;
    let mut failed = Vec::new();
    for (name, args) in &runs {
        let first = if *name == "train" { train_dir.clone() } else { root.path().join(name) };
        let second = root.path().join(format!("{name}_replay"));
        let mut a: Vec<&str> = vec!["--quiet", "--seed", "3", "--out", first.to_str().expect("utf-8")];
        a.extend(args.iter().map(String::as_str));
        let code_a = cli(&a);
        let run_json = first.join("run.json");
        let code_b = cli(&["--quiet", "--out", second.to_str().expect("utf-8"), "replay", run_json.to_str().expect("utf-8")]);
        let (ta, tb) = (tree(&first), tree(&second));
        let equal = if *name == "bench" {
            ta.len() == tb.len()
                && ta.iter().zip(&tb).all(|((na, ba), (nb, bb))| {
                    na == nb && if na.ends_with(".csv") { without_timings(ba) == without_timings(bb) } else { ba == bb }
                })
        } else {
            ta == tb
        };
        if code_a == 0 && code_b == 0 && equal && !ta.is_empty() {
            same += 1;
        } else {
            failed.push(*name);
        }
    }
    verdict(
        failed.is_empty(),
        format!(
            "{same}/{} subcommands replay byte-identically (bench timing columns excluded){}",
            runs.len(),
            if failed.is_empty() { String::new() } else { format!("; differing: {failed:?}") }
        ),
    )
}

// ---------------------------------------------------------------- harness

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
}

fn main() {
    // libtest flags such as `--nocapture` or a name filter are ignored.
    let only: Option<HashSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|s| s.contains(&id));
    let crit = |id, name, secs| Criterion {
        id,
        name,
        budget: Duration::from_secs(secs),
    };
    let table = [
        crit(1, "autodiff soundness", 120),
        crit(2, "windowed attention parity", 60),
        crit(3, "condition blocking", 60),
        crit(4, "position overlap-freedom", 10),
        crit(5, "flop linearity and speed direction", 180),
        crit(6, "multi-step reduction", 10),
        crit(7, "adjacent-velocity inequality", 60),
        crit(8, "euler error scaling", 300),
        crit(9, "single- vs multi-step lipschitz", 1800),
        crit(10, "alignment-loss direction", 1800),
        crit(11, "end-to-end toy capability", 2700),
        crit(12, "determinism and replay", 60),
    ];

    let mut cap: Option<Result<Capability>> = None;
    let mut results = Vec::new();
    // 11 runs before 7 and 8 so they can reuse its model.
    for id in [1, 2, 3, 4, 5, 6, 11, 7, 8, 9, 10, 12] {
        if !wanted(id) {
            continue;
        }
        let c = &table[id - 1];
        let start = Instant::now();
        if matches!(id, 7 | 8 | 11) && cap.is_none() {
            cap = Some(train_capability());
        }
        let outcome = catch_unwind(AssertUnwindSafe(|| match id {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(cap.as_ref().expect("trained")),
            8 => criterion_8(cap.as_ref().expect("trained")),
            9 => criterion_9(),
            10 => criterion_10(),
            11 => criterion_11(cap.as_ref().expect("trained")),
            12 => criterion_12(),
            _ => unreachable!(),
        }));
        let elapsed = start.elapsed();
        let (pass, detail) = match outcome {
            Ok(Ok(v)) => (v.pass, v.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".into()),
        };
        let in_time = elapsed <= c.budget;
        let ok = pass && in_time;
        println!(
            "{} [{:>2}] {}: {detail} ({:.1} s of {} s{})",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
        results.push((id, ok));
    }
    results.sort();
    let passed = results.iter().filter(|r| r.1).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
