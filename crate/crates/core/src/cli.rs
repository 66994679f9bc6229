//! Command-line front end. Every run writes `run.json` under `--out`; the
//! `replay` subcommand re-executes one.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    compare_alignment, compare_ssp_mtp, estimate_lipschitz, measure_smoothness, model_error_curve, ratio_cdf, svg_lines,
    CompareConfig, LipschitzConfig,
};
use crate::attention::{plan_windows, Parity};
use crate::bench::{bench_attention, to_csv, AttnBenchConfig};
use crate::data::{make_task, Dataset, Task};
use crate::error::{invalid, Result};
use crate::imageio::write_ppm;
use crate::layout::{assign_positions, Grid};
use crate::model::{count_params, describe, ToyDiT, ToyDiTParams};
use crate::numerics::{odt, Float};
use crate::sampler::{integrate, ConditionedModel, SampleConfig};
use crate::trainer::{evaluate, generate, train, TrainConfig, TrainOptions};

pub const SEED_ENV: &str = "OMNIDIT_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DTypeArg {
    F32,
    F64,
}

#[derive(Clone, Debug, Parser, Serialize, Deserialize)]
#[command(name = "tryon-dit", version, about = "Toy multi-reference diffusion transformer for try-on and try-off")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Global seed (default: $OMNIDIT_SEED, else 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [default: out].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Training config JSON; also supplies model and data settings elsewhere.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub quiet: bool,
    #[arg(long, global = true, value_enum, default_value = "f32")]
    pub dtype: DTypeArg,
    /// Worker threads; 1 is fully deterministic.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
    /// Resolved config recorded by a previous run.
    #[arg(skip)]
    #[serde(default)]
    pub inline_config: Option<TrainConfig>,
}

#[derive(Clone, Debug, Subcommand, Serialize, Deserialize)]
pub enum Command {
    /// Write a procedural triplet dataset.
    GenData {
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[arg(long, default_value_t = 16)]
        image_size: usize,
        /// Also write PPM/PGM previews.
        #[arg(long)]
        images: bool,
    },
    /// Run the two-stage schedule.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-stage step counts, overriding the config (e.g. `500,500`).
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
    },
    /// Generate images for held-out items.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "model_based_tryon")]
        task: Task,
        #[arg(long, default_value_t = 0)]
        item: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 30)]
        steps: usize,
        #[arg(long, default_value_t = 4.0)]
        guidance: f64,
    },
    /// Field diagnostics and paired comparisons.
    Analyze {
        #[command(subcommand)]
        what: Analyze,
    },
    Bench {
        #[command(subcommand)]
        what: Bench,
    },
    Layout {
        #[command(subcommand)]
        what: LayoutCmd,
    },
    Model {
        #[command(subcommand)]
        what: ModelCmd,
    },
    /// Held-out metrics of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        items: usize,
        #[arg(long, default_value_t = 30)]
        steps: usize,
        #[arg(long, default_value_t = 4.0)]
        guidance: f64,
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<Task>>,
    },
    /// Re-execute a recorded `run.json`.
    Replay { run: PathBuf },
}

#[derive(Clone, Debug, Subcommand, Serialize, Deserialize)]
pub enum Analyze {
    Lipschitz {
        #[command(flatten)]
        model: ModelSource,
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
        #[arg(long, default_value_t = 16)]
        items: usize,
        #[arg(long, default_value_t = 30)]
        steps: usize,
        #[arg(long, default_value = "model_based_tryon")]
        task: Task,
    },
    Smoothness {
        #[command(flatten)]
        model: ModelSource,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = crate::objective::DEFAULT_DT)]
        dt: f64,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 16)]
        items: usize,
        #[arg(long, default_value = "model_based_tryon")]
        task: Task,
    },
    Errdt {
        #[command(flatten)]
        model: ModelSource,
        /// Step sizes as `1/N` or decimals.
        #[arg(long, value_delimiter = ',', default_value = "1/8,1/16,1/32,1/64,1/128")]
        dts: Vec<String>,
        #[arg(long, default_value_t = 16)]
        items: usize,
        #[arg(long, default_value = "model_based_tryon")]
        task: Task,
    },
    Compare {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_enum, default_value = "lipschitz")]
        experiment: Experiment,
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
        #[arg(long, default_value_t = 16)]
        items: usize,
        #[arg(long, value_delimiter = ',')]
        dts: Option<Vec<String>>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Experiment {
    /// Single-step versus multi-step objective, by Lipschitz estimate.
    Lipschitz,
    /// With versus without the alignment term, by masked cosine.
    Alignment,
}

/// Where analysis commands take parameters from.
#[derive(Clone, Debug, clap::Args, Serialize, Deserialize)]
pub struct ModelSource {
    /// Checkpoint (or params) directory; defaults to a fresh init.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Initialize every tensor from N(0, std²) instead of the training init.
    #[arg(long)]
    pub init_std: Option<f64>,
}

#[derive(Clone, Debug, Subcommand, Serialize, Deserialize)]
pub enum Bench {
    /// Windowed versus single-window reference attention.
    Attn {
        #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
        ref_tokens: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        window: usize,
        #[arg(long, default_value_t = 1)]
        heads: usize,
        #[arg(long, default_value_t = 16)]
        head_dim: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

#[derive(Clone, Debug, Subcommand, Serialize, Deserialize)]
pub enum LayoutCmd {
    /// Token positions and window plans of one sequence.
    Dump {
        /// Reference grids as `WxH` in patches; defaults to one copy of the
        /// noisy grid.
        #[arg(long, value_delimiter = ',')]
        refs: Option<Vec<String>>,
        #[arg(long, default_value_t = crate::data::vocab::PROMPT_LEN)]
        text: usize,
        #[arg(long)]
        window: Option<usize>,
    },
}

#[derive(Clone, Debug, Subcommand, Serialize, Deserialize)]
pub enum ModelCmd {
    /// Parameter table of the configured model.
    Info,
}

/// What a run records for replay.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub seed: u64,
    pub cli: Cli,
}

/// Parses `args` (including the program name), runs, and returns the exit
/// code: 0 on success, 1 on runtime failure, 2 on usage errors.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(cli.quiet);
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn init_logging(quiet: bool) {
    let level = if quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| invalid(format!("{SEED_ENV}={s:?} is not an integer"))),
        Err(_) => Ok(None),
    }
}

/// Resolves seed, config and output directory, records `run.json`, then
/// dispatches.
pub fn run(mut cli: Cli) -> Result<()> {
    if let Command::Replay { run } = &cli.command {
        return replay(run, cli.out.clone());
    }
    let seed_override = match cli.seed {
        Some(s) => Some(s),
        None => env_seed()?,
    };
    let mut cfg = match (&cli.inline_config, &cli.config) {
        (Some(c), _) => c.clone(),
        (None, Some(p)) => TrainConfig::load(p)?,
        (None, None) => checkpoint_config(&cli.command)?.unwrap_or_default(),
    };
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    let seed = cfg.seed;
    cli.seed = Some(seed);
    cli.inline_config = Some(cfg.clone());
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out)?;
    let record = RunRecord {
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        cli: cli.clone(),
    };
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    if cli.threads > 1 {
        info!("running with {} threads; outputs stay per-seed deterministic", cli.threads);
    }
    match cli.dtype {
        DTypeArg::F32 => dispatch::<f32>(&cli, &cfg, &out),
        DTypeArg::F64 => dispatch::<f64>(&cli, &cfg, &out),
    }
}

/// Config stored next to a checkpoint, when the command names one.
fn checkpoint_config(cmd: &Command) -> Result<Option<TrainConfig>> {
    let dir = match cmd {
        Command::Sample { checkpoint, .. } | Command::Evaluate { checkpoint, .. } => checkpoint.clone(),
        Command::Analyze { what } => match what {
            Analyze::Lipschitz { model, .. } | Analyze::Smoothness { model, .. } | Analyze::Errdt { model, .. } => {
                model.checkpoint.clone()
            }
            Analyze::Compare { .. } => None,
        },
        Command::Train { resume, .. } => resume.clone(),
        _ => None,
    };
    let Some(dir) = dir else { return Ok(None) };
    let state = dir.join("state.json");
    if !state.exists() {
        return Ok(None);
    }
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(state)?)?;
    Ok(Some(serde_json::from_value(v["config"].clone())?))
}

fn replay(path: &Path, out: Option<PathBuf>) -> Result<()> {
    let record: RunRecord = serde_json::from_str(&fs::read_to_string(path)?)?;
    let mut cli = record.cli;
    if out.is_some() {
        cli.out = out;
    }
    info!("replaying {} (seed {})", path.display(), record.seed);
    run(cli)
}

fn load_model<F: Float>(src: &ModelSource, cfg: &TrainConfig) -> Result<ToyDiT<F>> {
    let params = match (&src.checkpoint, src.init_std) {
        (Some(dir), _) => {
            let p = dir.join("params");
            ToyDiTParams::load(if p.exists() { &p } else { dir })?
        }
        (None, Some(std)) => ToyDiTParams::init_random(&cfg.model, cfg.seed, std)?,
        (None, None) => ToyDiTParams::init(&cfg.model, cfg.seed)?,
    };
    Ok(ToyDiT::new(params))
}

fn checkpoint_source(checkpoint: &Option<PathBuf>) -> ModelSource {
    ModelSource {
        checkpoint: checkpoint.clone(),
        init_std: None,
    }
}

pub fn parse_dt(s: &str) -> Result<f64> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (
                a.trim().parse().map_err(|_| invalid(format!("bad step size {s:?}")))?,
                b.trim().parse().map_err(|_| invalid(format!("bad step size {s:?}")))?,
            );
            a / b
        }
        None => s.parse().map_err(|_| invalid(format!("bad step size {s:?}")))?,
    };
    if !(v > 0.0 && v <= 1.0) {
        return Err(invalid(format!("step size {s} outside (0, 1]")));
    }
    Ok(v)
}

fn parse_grid(s: &str) -> Result<Grid> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| invalid(format!("grid {s:?} is not WxH")))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| invalid(format!("grid {s:?} is not WxH")));
    Ok(Grid::new(p(w)?, p(h)?))
}

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn dispatch<F: Float>(cli: &Cli, cfg: &TrainConfig, out: &Path) -> Result<()> {
    let image_size = cfg.model.image_size;
    match &cli.command {
        Command::GenData { size, image_size, images } => {
            let ds = Dataset::generate(cfg.data.seed, *size, *image_size)?;
            ds.save(out, *images)?;
            info!("wrote {} triplets to {}", ds.len(), out.display());
        }
        Command::Train { resume, steps } => {
            let mut cfg = cfg.clone();
            if let Some(steps) = steps {
                if steps.len() != cfg.stages.len() {
                    return Err(invalid(format!("--steps needs {} values", cfg.stages.len())));
                }
                cfg.stages.iter_mut().zip(steps).for_each(|(s, &n)| s.steps = n);
            }
            write_json(out.join("config.json"), &cfg)?;
            let data = cfg.data.train_set(image_size)?;
            let opts = TrainOptions {
                out: Some(out.to_path_buf()),
                resume: resume.clone(),
                stop_at: None,
            };
            let res = train::<F>(&cfg, &data, &opts)?;
            if let Some(last) = res.metrics.last() {
                info!("finished at step {} with total loss {:.6}", res.steps_done, last.total);
            }
        }
        Command::Sample {
            checkpoint,
            task,
            item,
            count,
            steps,
            guidance,
        } => {
            let model = load_model::<F>(&checkpoint_source(checkpoint), cfg)?;
            let eval = Dataset::generate_range(cfg.data.seed, cfg.data.size + item..cfg.data.size + item + count, image_size)?;
            let sc = SampleConfig {
                steps: *steps,
                guidance: *guidance,
                seed: cfg.seed,
                record_trajectory: false,
            };
            let instances: Vec<_> = eval.items.iter().map(|t| make_task(t, *task)).collect();
            let indices: Vec<usize> = (*item..item + count).collect();
            let images = generate(&model, &instances, &indices, &sc)?;
            let dir = out.join("samples");
            fs::create_dir_all(&dir)?;
            for ((inst, img), idx) in instances.iter().zip(&images).zip(&indices) {
                let stem = format!("{}_{idx:04}", task.name());
                odt::save(dir.join(format!("{stem}.odt")), img)?;
                write_ppm(dir.join(format!("{stem}.ppm")), img)?;
                write_ppm(dir.join(format!("{stem}_target.ppm")), &inst.target)?;
                for (r, c) in inst.conditions.iter().enumerate() {
                    write_ppm(dir.join(format!("{stem}_cond{r}.ppm")), c)?;
                }
            }
            info!("wrote {} samples to {}", images.len(), dir.display());
        }
        Command::Analyze { what } => analyze::<F>(what, cli, cfg, out)?,
        Command::Bench {
            what:
                Bench::Attn {
                    ref_tokens,
                    window,
                    heads,
                    head_dim,
                    repeats,
                },
        } => {
            let bc = AttnBenchConfig {
                ref_tokens: ref_tokens.clone(),
                window: *window,
                heads: *heads,
                head_dim: *head_dim,
                repeats: *repeats,
                seed: cfg.seed,
                ..AttnBenchConfig::default()
            };
            let rows = bench_attention(&bc)?;
            let csv = to_csv(&rows)?;
            fs::write(out.join("bench_attn.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Layout {
            what: LayoutCmd::Dump { refs, text, window },
        } => {
            let g = cfg.model.grid();
            let noisy = Grid::new(g, g);
            let grids = match refs {
                Some(r) => r.iter().map(|s| parse_grid(s)).collect::<Result<Vec<_>>>()?,
                None => vec![noisy],
            };
            let seq = assign_positions(noisy, &grids, *text)?;
            let m = window.unwrap_or(cfg.model.window_size);
            let plans = [Parity::Regular, Parity::Shifted]
                .iter()
                .map(|&p| plan_windows(&seq, m, p))
                .collect::<Result<Vec<_>>>()?;
            write_json(
                out.join("layout.json"),
                &serde_json::json!({ "sequence": seq, "window": m, "plans": plans }),
            )?;
        }
        Command::Model { what: ModelCmd::Info } => {
            let text = describe(&cfg.model)?;
            fs::write(out.join("model_info.txt"), &text)?;
            write_json(out.join("model_info.json"), &count_params(&cfg.model))?;
            print!("{text}");
        }
        Command::Evaluate {
            checkpoint,
            items,
            steps,
            guidance,
            tasks,
        } => {
            let model = load_model::<F>(&checkpoint_source(checkpoint), cfg)?;
            let eval = cfg.data.eval_set(image_size, *items)?;
            let sc = SampleConfig {
                steps: *steps,
                guidance: *guidance,
                seed: cfg.seed,
                record_trajectory: false,
            };
            let tasks = tasks.clone().unwrap_or_else(|| Task::ALL.to_vec());
            let report = evaluate(&model, &eval, &tasks, &sc)?;
            write_json(out.join("eval.json"), &report)?;
        }
        Command::Replay { .. } => unreachable!("handled in run"),
    }
    Ok(())
}

fn analyze<F: Float>(what: &Analyze, cli: &Cli, cfg: &TrainConfig, out: &Path) -> Result<()> {
    let image_size = cfg.model.image_size;
    match what {
        Analyze::Lipschitz {
            model,
            pairs,
            items,
            steps,
            task,
        } => {
            let m = load_model::<F>(model, cfg)?;
            let eval = cfg.data.eval_set(image_size, *items)?;
            let lc = LipschitzConfig {
                n_pairs: *pairs,
                items: *items,
                steps: *steps,
                task: *task,
                seed: cfg.seed,
            };
            let est = estimate_lipschitz(&m, &eval, &lc)?;
            let mut w = csv::Writer::from_path(out.join("lipschitz.csv"))?;
            w.write_record(["pair", "ratio"])?;
            for (i, r) in est.ratios.iter().enumerate() {
                w.write_record([i.to_string(), r.to_string()])?;
            }
            w.flush()?;
            let summary = serde_json::json!({
                "l_hat": est.l_hat, "n_pairs": est.n_pairs, "sampling": est.sampling,
                "adjacent_pairs": est.adjacent_pairs, "random_pairs": est.random_pairs,
                "median": est.median, "p90": est.p90, "p99": est.p99,
            });
            write_json(out.join("lipschitz.json"), &summary)?;
            let svg = svg_lines("Lipschitz ratios", "ratio", "CDF", &[("pairs".into(), ratio_cdf(&est.ratios))]);
            fs::write(out.join("lipschitz.svg"), svg)?;
            println!("L_hat = {}", est.l_hat);
        }
        Analyze::Smoothness {
            model,
            k,
            dt,
            samples,
            items,
            task,
        } => {
            let m = load_model::<F>(model, cfg)?;
            let eval = cfg.data.eval_set(image_size, *items)?;
            let report = measure_smoothness(&m, &eval, *task, *k, *dt, *samples, cfg.seed)?;
            let mut w = csv::Writer::from_path(out.join("smoothness.csv"))?;
            w.write_record(["step", "t_offset", "l_ssp", "stderr"])?;
            for (i, s) in report.l_ssp.iter().enumerate() {
                w.write_record([i.to_string(), (i as f64 * dt).to_string(), s.mean.to_string(), s.stderr.to_string()])?;
            }
            w.flush()?;
            write_json(out.join("smoothness.json"), &report)?;
            if report.violations > 0 {
                warn!("{} adjacent-velocity bound violations", report.violations);
            }
        }
        Analyze::Errdt { model, dts, items, task } => {
            let m = load_model::<F>(model, cfg)?;
            let eval = cfg.data.eval_set(image_size, *items)?;
            let dts = dts.iter().map(|s| parse_dt(s)).collect::<Result<Vec<_>>>()?;
            let curve = model_error_curve(&m, &eval, *task, *items, &dts, cfg.seed)?;
            let mut w = csv::Writer::from_path(out.join("errdt.csv"))?;
            w.write_record(["dt", "steps", "error"])?;
            for p in &curve.points {
                w.write_record([p.dt.to_string(), p.steps.to_string(), p.error.to_string()])?;
            }
            w.flush()?;
            write_json(out.join("errdt.json"), &curve)?;
            let pts = curve.points.iter().map(|p| (p.dt.log10(), p.error.max(1e-300).log10())).collect();
            fs::write(
                out.join("errdt.svg"),
                svg_lines("Euler error", "log10 dt", "log10 error", &[("model".into(), pts)]),
            )?;
            match curve.slope {
                Some(s) => println!("slope = {s}"),
                None => println!("exact"),
            }
        }
        Analyze::Compare {
            seeds,
            experiment,
            pairs,
            items,
            dts,
        } => {
            let opts = CompareConfig {
                lipschitz: LipschitzConfig {
                    n_pairs: *pairs,
                    items: *items,
                    seed: cfg.seed,
                    ..LipschitzConfig::default()
                },
                eval_items: *items,
                error_dts: dts
                    .iter()
                    .flatten()
                    .map(|s| parse_dt(s))
                    .collect::<Result<Vec<_>>>()?,
                sample: SampleConfig {
                    seed: cfg.seed,
                    ..SampleConfig::default()
                },
                threads: cli.threads,
                ..CompareConfig::default()
            };
            let report = match experiment {
                Experiment::Lipschitz => compare_ssp_mtp::<F>(cfg, seeds, &opts)?,
                Experiment::Alignment => compare_alignment::<F>(cfg, seeds, &opts)?,
            };
            report.write(out, "compare")?;
            if *experiment == Experiment::Lipschitz {
                let series: Vec<(String, Vec<(f64, f64)>)> = report
                    .baseline
                    .iter()
                    .chain(&report.treatment)
                    .map(|r| (format!("K={} seed {}", r.k, r.seed), ratio_cdf(&r.ratios)))
                    .collect();
                fs::write(out.join("compare.svg"), svg_lines("Lipschitz ratios", "ratio", "CDF", &series))?;
            }
            println!(
                "median baseline {:?}, median treatment {:?}, verdict {}",
                report.median_baseline, report.median_treatment, report.verdict
            );
        }
    }
    Ok(())
}

/// Guided integration of a single instance, for examples.
pub fn sample_one<F: Float>(model: &ToyDiT<F>, task: Task, triplet: &crate::data::Triplet, sc: &SampleConfig) -> Result<crate::numerics::Tensor<F>> {
    let inst = make_task(triplet, task);
    let lift = |t: &crate::numerics::Tensor<f64>| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.cast::<F>().reshape(&s)
    };
    let conds = inst.conditions.iter().map(lift).collect::<Result<Vec<_>>>()?;
    let field = ConditionedModel::new(model, conds, vec![inst.text_ids.clone()]);
    let x1 = crate::objective::draw_noise(sc.seed, 0x7331, &[1, 3, triplet.tryon.shape()[1], triplet.tryon.shape()[2]]);
    let o = integrate(&field, &x1, sc.steps, sc.guidance, false)?;
    o.image.reshape(triplet.tryon.shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(args: &[&str]) -> i32 {
        main_with_args(std::iter::once("tryon-dit").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(code(&[]), 2);
        assert_eq!(code(&["frobnicate"]), 2);
        assert_eq!(code(&["bench", "attn", "--window"]), 2);
    }

    #[test]
    fn runtime_errors_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(code(&["--out", out, "--config", "/nonexistent/cfg.json", "model", "info"]), 1);
    }

    #[test]
    fn dt_parsing() {
        assert_eq!(parse_dt("1/8").unwrap(), 0.125);
        assert_eq!(parse_dt("0.25").unwrap(), 0.25);
        assert!(parse_dt("2").is_err());
        assert!(parse_dt("a/b").is_err());
        assert_eq!(parse_grid("8x4").unwrap(), Grid::new(8, 4));
    }

    #[test]
    fn layout_dump_and_replay_agree() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let a_s = a.to_str().unwrap();
        assert_eq!(code(&["--out", a_s, "--quiet", "layout", "dump", "--refs", "8x8,4x4"]), 0);
        let run = a.join("run.json");
        assert_eq!(code(&["--out", b.to_str().unwrap(), "replay", run.to_str().unwrap()]), 0);
        let x = fs::read(a.join("layout.json")).unwrap();
        assert_eq!(x, fs::read(b.join("layout.json")).unwrap());
    }
}
