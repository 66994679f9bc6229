//! Builds the default toy network, prints its parameter table and runs one
//! velocity prediction for a two-reference try-on input.

use tryon_dit::data::{gen_triplet, make_task, Task};
use tryon_dit::model::{describe, ModelConfig, ToyDiT, ToyDiTParams};

fn main() -> tryon_dit::Result<()> {
    let cfg = ModelConfig::default();
    print!("{}", describe(&cfg)?);
    let model = ToyDiT::new(ToyDiTParams::<f64>::init_random(&cfg, 0, 0.05)?);
    let inst = make_task(&gen_triplet(3, cfg.image_size)?, Task::ModelBasedTryon);
    let v = model.forward(&inst.target, 0.5, &inst.conditions, &inst.text_ids)?;
    println!("velocity shape {:?}, norm {:.4}", v.shape(), v.norm());
    Ok(())
}
