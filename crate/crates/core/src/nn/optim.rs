//! Adam with bias correction, driven by a cosine-annealed learning rate.

use crate::error::{Error, Result};
use crate::nn::model::{DenoiserModel, Gradients};

pub const DEFAULT_LR: f32 = 5e-4;

/// `lr0 * (1 + cos(pi * step / total)) / 2`; steps past `total` stay at 0.
pub fn cosine_lr(step: u64, total: u64, lr0: f32) -> f32 {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as f64 / total as f64;
    (lr0 as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
    pub step: u64,
    pub lr0: f32,
    pub total_steps: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl OptimState {
    pub fn new(model: &DenoiserModel, lr0: f32, total_steps: u64) -> Self {
        let zeros: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        OptimState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            lr0,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn current_lr(&self) -> f32 {
        cosine_lr(self.step, self.total_steps, self.lr0)
    }
}

/// One Adam update at the scheduled learning rate for the current step.
pub fn adam_step(model: &mut DenoiserModel, grads: &Gradients, opt: &mut OptimState) -> Result<()> {
    let shapes_match = grads.len() == model.params().len()
        && opt.first_moment.len() == grads.len()
        && grads
            .iter()
            .zip(model.params())
            .zip(&opt.first_moment)
            .all(|((g, p), m)| g.len() == p.len() && m.len() == p.len());
    if !shapes_match {
        return Err(Error::ShapeMismatch(
            "gradients do not match model parameters".into(),
        ));
    }
    let lr = opt.current_lr() as f64;
    let t = (opt.step + 1) as i32;
    let (b1, b2, eps) = (opt.beta1 as f64, opt.beta2 as f64, opt.eps as f64);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in model
        .params_mut()
        .iter_mut()
        .zip(grads)
        .zip(opt.first_moment.iter_mut())
        .zip(opt.second_moment.iter_mut())
    {
        for i in 0..p.len() {
            let gi = g[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            p[i] = (p[i] as f64 - update) as f32;
        }
    }
    opt.step += 1;
    Ok(())
}
