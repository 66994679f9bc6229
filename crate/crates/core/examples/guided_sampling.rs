//! Samples every task layout from an untrained network with guidance and
//! writes the results as PPM files to the directory given as argument.

use std::path::PathBuf;

use tryon_dit::data::{gen_triplet, make_task, Task};
use tryon_dit::imageio::write_ppm;
use tryon_dit::model::{ModelConfig, ToyDiT, ToyDiTParams};
use tryon_dit::sampler::{sample, ConditionedModel, SampleConfig};

fn main() -> tryon_dit::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "sampling_out".into()));
    std::fs::create_dir_all(&out)?;
    let cfg = ModelConfig::default();
    let model = ToyDiT::new(ToyDiTParams::<f32>::init_random(&cfg, 2, 0.05)?);
    let triplet = gen_triplet(5, cfg.image_size)?;
    let sc = SampleConfig::default();
    for task in Task::ALL {
        let inst = make_task(&triplet, task);
        let lift = |t: &tryon_dit::numerics::Tensor<f64>| t.cast::<f32>().reshape(&[1, 3, 16, 16]);
        let conds = inst.conditions.iter().map(lift).collect::<tryon_dit::Result<Vec<_>>>()?;
        let field = ConditionedModel::new(&model, conds, vec![inst.text_ids.clone()]);
        let o = sample(&field, &[1, 3, 16, 16], &sc)?;
        let path = out.join(format!("{}.ppm", task.name()));
        write_ppm(&path, &o.image.reshape(&[3, 16, 16])?)?;
        println!("{}: {} steps at guidance {} -> {}", task.name(), sc.steps, sc.guidance, path.display());
    }
    Ok(())
}
