//! Evaluates the single-step, unrolled multi-step and alignment losses for
//! the exact target velocity and for an untrained network.

use tryon_dit::data::{gen_triplet, make_task, Task};
use tryon_dit::model::{ModelConfig, ParamVars, SequencePlan, ToyDiTParams};
use tryon_dit::numerics::{Graph, Tensor};
use tryon_dit::objective::{
    draw_noise, mtp_loss, total_loss, FlowSample, IdentityExtractor, ModelField, ObjectiveConfig, OracleField,
};

fn main() -> tryon_dit::Result<()> {
    let cfg = ModelConfig::default();
    let inst = make_task(&gen_triplet(11, cfg.image_size)?, Task::ModelFreeTryon);
    let lift = |t: &Tensor<f64>| t.clone().reshape(&[1, 3, cfg.image_size, cfg.image_size]);
    let x0 = lift(&inst.target)?;
    let x1 = draw_noise(0, 1, x0.shape());
    let conds = inst.conditions.iter().map(lift).collect::<tryon_dit::Result<Vec<_>>>()?;
    let mask = lift(&inst.mask.to_tensor())?;
    let sample = FlowSample::new(x0, x1, vec![0.6], conds.clone(), vec![inst.text_ids.clone()], mask)?;

    for k in 1..=3 {
        let mut g = Graph::new();
        let oracle = OracleField { u: sample.u.clone() };
        let chain = mtp_loss(&mut g, &oracle, &sample, k, 0.03, false)?;
        println!("exact velocity, K={k}: loss {}", g.value(chain.loss).item());
    }

    let params = ToyDiTParams::<f64>::init_random(&cfg, 1, 0.05)?;
    let plan = SequencePlan::new(&cfg, 1, inst.text_ids.len(), 1)?;
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, &params, true);
    let conditions = conds.iter().map(|c| g.constant(c.clone())).collect();
    let field = ModelField {
        config: &cfg,
        params: &pv,
        plan: &plan,
        conditions,
        text_ids: inst.text_ids.clone(),
    };
    let loss = total_loss(&mut g, &field, &sample, &ObjectiveConfig::default(), &IdentityExtractor)?;
    println!("untrained network: {:?}", loss.breakdown);
    Ok(())
}
