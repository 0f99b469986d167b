//! AdamW, the warmup + cosine learning-rate schedule and parameter EMA.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use candle_core::{backprop::GradStore, Tensor};

use super::config::OptimConfig;
use crate::error::Result;
use crate::nn::ParamStore;

/// Learning rate for optimizer step `step` (0-based) out of `total`: linear
/// warmup from 0 over `warmup` steps, then cosine decay from `lr` to `min_lr`
/// reached at `step == total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, lr: f64, min_lr: f64) -> f64 {
    if step < warmup {
        return lr * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    min_lr + (lr - min_lr) * 0.5 * (1.0 + (PI * progress).cos())
}

pub fn warmup_steps(cfg: &OptimConfig, total: usize) -> usize {
    cfg.warmup_steps
        .unwrap_or_else(|| (cfg.warmup_frac * total as f64).round() as usize)
        .min(total)
}

/// Decoupled-weight-decay Adam over every parameter of a store. Decay is
/// applied to matrices only, not to biases or normalization gains.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: &OptimConfig, ps: &ParamStore) -> Result<Self> {
        let zeros = |ps: &ParamStore| -> Result<BTreeMap<String, Tensor>> {
            ps.vars()
                .iter()
                .map(|(k, v)| Ok((k.clone(), v.as_tensor().zeros_like()?)))
                .collect()
        };
        Ok(Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            steps: 0,
            m: zeros(ps)?,
            v: zeros(ps)?,
        })
    }

    pub fn step(&mut self, ps: &ParamStore, grads: &GradStore, lr: f64, clip_scale: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in ps.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let g = if clip_scale != 1.0 { g.affine(clip_scale, 0.0)? } else { g };
            let m = self.m.get_mut(name).expect("moment per parameter");
            *m = ((m.affine(self.beta1, 0.0)?) + g.affine(1.0 - self.beta1, 0.0)?)?.detach();
            let v = self.v.get_mut(name).expect("moment per parameter");
            *v = ((v.affine(self.beta2, 0.0)?) + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?.detach();
            let p = var.as_detached_tensor();
            let decayed = if p.rank() >= 2 && self.weight_decay > 0.0 {
                p.affine(1.0 - lr * self.weight_decay, 0.0)?
            } else {
                p.clone()
            };
            let denom = (v.affine(1.0 / c2, 0.0)?.sqrt()? + self.eps)?;
            let update = (m.affine(lr / c1, 0.0)? / denom)?;
            var.set(&(decayed - update)?)?;
        }
        Ok(())
    }
}

/// Global L2 norm of all parameter gradients.
pub fn grad_norm(ps: &ParamStore, grads: &GradStore) -> Result<f64> {
    let mut total = 0.0;
    for var in ps.vars().values() {
        if let Some(g) = grads.get(var.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

/// Exponential moving average of parameters: `s ← d·s + (1-d)·p`.
pub struct Ema {
    pub decay: f64,
    pub shadow: BTreeMap<String, Tensor>,
}

impl Ema {
    pub fn new(decay: f64, ps: &ParamStore) -> Self {
        Self {
            decay,
            shadow: ps.tensors(),
        }
    }

    pub fn update(&mut self, ps: &ParamStore) -> Result<()> {
        for (name, var) in ps.vars() {
            let s = self.shadow.get_mut(name).expect("shadow per parameter");
            *s = (s.affine(self.decay, 0.0)? + var.as_detached_tensor().affine(1.0 - self.decay, 0.0)?)?.detach();
        }
        Ok(())
    }
}
