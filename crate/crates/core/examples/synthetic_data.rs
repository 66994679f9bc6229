//! Generates a few garment/model/try-on triplets, shows the task inputs and
//! saves the dataset with previews.

use tryon_dit::data::{make_task, Dataset, Task};

fn main() -> tryon_dit::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "data_out".into());
    let ds = Dataset::generate(0, 4, 16)?;
    for (i, t) in ds.items.iter().enumerate() {
        println!("item {i}: {:?}, garment pixels {}", t.attrs, t.mask.count());
        for task in Task::ALL {
            let inst = make_task(t, task);
            println!("  {:<18} refs {} prompt {:?}", task.name(), inst.conditions.len(), inst.text_ids);
        }
    }
    ds.save(std::path::Path::new(&out), true)?;
    println!("saved to {out}");
    Ok(())
}
