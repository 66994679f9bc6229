//! Trains a small network for a few dozen steps through both stages, then
//! scores it on held-out items.

use tryon_dit::data::Task;
use tryon_dit::model::ModelConfig;
use tryon_dit::sampler::SampleConfig;
use tryon_dit::trainer::{evaluate, train, DataConfig, ExtractorConfig, TrainConfig, TrainOptions};

fn main() -> tryon_dit::Result<()> {
    let mut cfg = TrainConfig {
        stages: TrainConfig::two_stage(20, 20, 2, 2e-3),
        ..TrainConfig::default()
    };
    cfg.model = ModelConfig {
        depth: 2,
        ..ModelConfig::with_width(32, 2)
    };
    cfg.data = DataConfig { seed: 0, size: 64 };
    cfg.extractor = ExtractorConfig::Identity;
    let data = cfg.data.train_set(cfg.model.image_size)?;
    let run = train::<f32>(&cfg, &data, &TrainOptions::default())?;
    let (first, last) = (&run.metrics[0], run.metrics.last().expect("steps ran"));
    println!("loss {:.4} -> {:.4} over {} steps", first.total, last.total, run.steps_done);
    let eval = cfg.data.eval_set(cfg.model.image_size, 4)?;
    let model = tryon_dit::model::ToyDiT::new(run.params);
    let sc = SampleConfig {
        steps: 10,
        ..SampleConfig::default()
    };
    let report = evaluate(&model, &eval, &Task::ALL, &sc)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
