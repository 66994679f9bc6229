//! Euler integration of a velocity field from noise (`t = 1`) to data
//! (`t = 0`) with classifier-free guidance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::vocab;
use crate::error::{invalid, Error, Result};
use crate::model::ToyDiT;
use crate::numerics::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    pub record_trajectory: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            guidance: 4.0,
            seed: 0,
            record_trajectory: false,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("steps must be at least 1"));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(invalid(format!("guidance must be ≥ 0, got {}", self.guidance)));
        }
        Ok(())
    }
}

/// A velocity field with an optional unconditional branch. States are
/// `[B, C, H, W]`.
pub trait VelocityField<F: Float> {
    fn velocity(&self, x: &Tensor<F>, t: f64, conditional: bool) -> Result<Tensor<F>>;

    /// Conditional and unconditional velocities together; fields that can
    /// batch both branches override this.
    fn velocity_pair(&self, x: &Tensor<F>, t: f64) -> Result<(Tensor<F>, Tensor<F>)> {
        Ok((self.velocity(x, t, true)?, self.velocity(x, t, false)?))
    }
}

/// `v_u + g·(v_c - v_u)`; exactly `v_c` at `g = 1`.
pub fn guide<F: Float>(cond: &Tensor<F>, uncond: &Tensor<F>, g: f64) -> Result<Tensor<F>> {
    if g == 1.0 {
        return Ok(cond.clone());
    }
    let g = F::of(g);
    uncond.zip_map(cond, |u, c| u + g * (c - u))
}

/// The toy network with bound conditions. The unconditional branch zeroes
/// every condition image and replaces every prompt token with the null token.
pub struct ConditionedModel<'a, F: Float> {
    pub model: &'a ToyDiT<F>,
    pub conditions: Vec<Tensor<F>>,
    pub text_ids: Vec<Vec<usize>>,
}

impl<'a, F: Float> ConditionedModel<'a, F> {
    pub fn new(model: &'a ToyDiT<F>, conditions: Vec<Tensor<F>>, text_ids: Vec<Vec<usize>>) -> Self {
        Self {
            model,
            conditions,
            text_ids,
        }
    }

    fn null_inputs(&self) -> (Vec<Tensor<F>>, Vec<Vec<usize>>) {
        (
            self.conditions.iter().map(|c| Tensor::zeros(c.shape())).collect(),
            self.text_ids.iter().map(|ids| vec![vocab::NULL; ids.len()]).collect(),
        )
    }
}

impl<F: Float> VelocityField<F> for ConditionedModel<'_, F> {
    fn velocity(&self, x: &Tensor<F>, t: f64, conditional: bool) -> Result<Tensor<F>> {
        let b = x.shape()[0];
        let ts = vec![t; b];
        if conditional {
            self.model.velocity_batch(x, &ts, &self.conditions, &self.text_ids)
        } else {
            let (c, text) = self.null_inputs();
            self.model.velocity_batch(x, &ts, &c, &text)
        }
    }

    fn velocity_pair(&self, x: &Tensor<F>, t: f64) -> Result<(Tensor<F>, Tensor<F>)> {
        let b = x.shape()[0];
        let (nc, nt) = self.null_inputs();
        let xx = Tensor::stack(&[x.clone(), x.clone()])?.reshape(&double(x.shape()))?;
        let cc = self
            .conditions
            .iter()
            .zip(&nc)
            .map(|(c, z)| Tensor::stack(&[c.clone(), z.clone()])?.reshape(&double(c.shape())))
            .collect::<Result<Vec<_>>>()?;
        let mut text = self.text_ids.clone();
        text.extend(nt);
        let v = self.model.velocity_batch(&xx, &vec![t; 2 * b], &cc, &text)?;
        let n = x.numel();
        let (vc, vu) = v.data().split_at(n);
        Ok((
            Tensor::new(x.shape().to_vec(), vc.to_vec())?,
            Tensor::new(x.shape().to_vec(), vu.to_vec())?,
        ))
    }
}

fn double(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[0] *= 2;
    s
}

/// `t_k = 1 - k/N`, computed per index.
pub fn time_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| 1.0 - k as f64 / steps as f64).collect()
}

#[derive(Clone, Debug)]
pub struct TrajectoryPoint<F: Float> {
    pub t: f64,
    pub x: Tensor<F>,
    /// Guided velocity used to leave this state; `None` at the final state.
    pub v: Option<Tensor<F>>,
}

#[derive(Clone, Debug)]
pub struct Trajectory<F: Float> {
    pub points: Vec<TrajectoryPoint<F>>,
}

impl<F: Float> Trajectory<F> {
    /// States stacked as `[steps + 1, ...]`.
    pub fn states(&self) -> Result<Tensor<F>> {
        Tensor::stack(&self.points.iter().map(|p| p.x.clone()).collect::<Vec<_>>())
    }
}

pub struct SampleOutput<F: Float> {
    /// Final state clamped to `[-1, 1]`.
    pub image: Tensor<F>,
    /// Final state before clamping.
    pub raw: Tensor<F>,
    pub trajectory: Option<Trajectory<F>>,
}

/// Euler steps `x ← x - (1/N)·v_g` from `x1`.
pub fn integrate<F: Float>(
    field: &dyn VelocityField<F>,
    x1: &Tensor<F>,
    steps: usize,
    guidance: f64,
    record: bool,
) -> Result<SampleOutput<F>> {
    if steps == 0 {
        return Err(invalid("steps must be at least 1"));
    }
    let grid = time_grid(steps);
    let h = F::of(1.0 / steps as f64);
    let mut x = x1.clone();
    let mut points = Vec::new();
    for k in 0..steps {
        let t = grid[k];
        let v = if guidance == 1.0 {
            field.velocity(&x, t, true)?
        } else {
            let (c, u) = field.velocity_pair(&x, t)?;
            guide(&c, &u, guidance)?
        };
        let next = x.zip_map(&v, |a, b| a - h * b)?;
        if !next.all_finite() {
            return Err(Error::Diverged { step: k });
        }
        if record {
            points.push(TrajectoryPoint {
                t,
                x: x.clone(),
                v: Some(v),
            });
        }
        x = next;
    }
    if record {
        points.push(TrajectoryPoint {
            t: grid[steps],
            x: x.clone(),
            v: None,
        });
    }
    Ok(SampleOutput {
        image: x.map(|v| v.max(-F::one()).min(F::one())),
        raw: x,
        trajectory: record.then_some(Trajectory { points }),
    })
}

/// Draws `x1` from `cfg.seed` and integrates the guided field.
pub fn sample<F: Float>(field: &dyn VelocityField<F>, shape: &[usize], cfg: &SampleConfig) -> Result<SampleOutput<F>> {
    cfg.validate()?;
    let x1 = crate::objective::draw_noise(cfg.seed, 0x7331, shape);
    integrate(field, &x1, cfg.steps, cfg.guidance, cfg.record_trajectory)
}

/// Number of steps `N` with `dt = 1/N`, if `dt` has that form.
pub fn steps_for(dt: f64) -> Result<usize> {
    let n = (1.0 / dt).round();
    if !(n >= 1.0) || (1.0 / n - dt).abs() > 1e-12 * dt.max(1e-300) * 1e3 {
        return Err(invalid(format!("dt = {dt} is not of the form 1/N")));
    }
    Ok(n as usize)
}

/// Unguided integration from the same `x1` at every `dt`; keys are `N`.
pub fn integrate_with_dt<F: Float>(
    field: &dyn VelocityField<F>,
    x1: &Tensor<F>,
    dts: &[f64],
) -> Result<BTreeMap<usize, Tensor<F>>> {
    let mut out = BTreeMap::new();
    for &dt in dts {
        let n = steps_for(dt)?;
        out.insert(n, integrate(field, x1, n, 1.0, false)?.raw);
    }
    Ok(out)
}

/// Closure-backed field for analytic tests; ignores conditioning.
pub struct FnField<G>(pub G);

impl<F: Float, G: Fn(&Tensor<F>, f64) -> Tensor<F>> VelocityField<F> for FnField<G> {
    fn velocity(&self, x: &Tensor<F>, t: f64, _conditional: bool) -> Result<Tensor<F>> {
        Ok((self.0)(x, t))
    }
}
