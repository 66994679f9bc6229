//! Paired single-step versus two-step trainings on three seeds with a very
//! small budget, reporting per-seed Lipschitz estimates.

use tryon_dit::analysis::{compare_ssp_mtp, CompareConfig, LipschitzConfig};
use tryon_dit::model::ModelConfig;
use tryon_dit::trainer::{DataConfig, ExtractorConfig, TrainConfig};

fn main() -> tryon_dit::Result<()> {
    let mut cfg = TrainConfig {
        stages: TrainConfig::two_stage(15, 15, 2, 2e-3),
        ..TrainConfig::default()
    };
    cfg.model = ModelConfig {
        depth: 2,
        ..ModelConfig::with_width(16, 2)
    };
    cfg.data = DataConfig { seed: 1, size: 32 };
    cfg.extractor = ExtractorConfig::Identity;
    let opts = CompareConfig {
        lipschitz: LipschitzConfig {
            n_pairs: 500,
            items: 2,
            steps: 10,
            ..LipschitzConfig::default()
        },
        eval_items: 2,
        ..CompareConfig::default()
    };
    let report = compare_ssp_mtp::<f32>(&cfg, &[0, 1, 2], &opts)?;
    print!("{}", report.to_csv()?);
    println!("medians {:?} vs {:?}", report.median_baseline, report.median_treatment);
    Ok(())
}
