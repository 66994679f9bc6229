mod common;

use tryon_dit::analysis::{compare_ssp_mtp, CompareConfig, LipschitzConfig};
use tryon_dit::trainer::Trainer;

#[test]
fn two_thousand_steps_lower_the_loss() {
    let cfg = common::small_train_config(8, (1000, 1000));
    let data = cfg.data.train_set(cfg.model.image_size).unwrap();
    let mut tr = Trainer::<f32>::new(&cfg, &data).unwrap();
    // Fixed probe batch from the second stage, so both evaluations see the
    // same items, noise and times.
    let probe = 1500;
    let before = tr.loss_at(probe).unwrap().total;
    while !tr.finished() {
        tr.step().unwrap();
    }
    let after = tr.loss_at(probe).unwrap().total;
    assert!(after < before, "loss {before} -> {after}");
    assert_eq!(tr.smoothness_violations(), 0);
}

#[test]
fn identical_arms_give_identical_medians() {
    let cfg = common::small_train_config(8, (4, 4));
    let opts = CompareConfig {
        lipschitz: LipschitzConfig {
            n_pairs: 200,
            items: 2,
            steps: 5,
            ..LipschitzConfig::default()
        },
        eval_items: 2,
        k_mtp: 2,
        k_base: 2,
        ..CompareConfig::default()
    };
    let r = compare_ssp_mtp::<f64>(&cfg, &[0, 1, 2], &opts).unwrap();
    assert_eq!(
        r.median_baseline.map(f64::to_bits),
        r.median_treatment.map(f64::to_bits)
    );
    assert!(!r.verdict);
}
