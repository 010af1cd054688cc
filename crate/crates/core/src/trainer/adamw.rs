use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{GlyphTransformer, LoraPart, ParamKey};
use crate::real::Real;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<ParamKey, (Vec<f64>, Vec<f64>)>,
}

/// Whether decoupled decay touches `key`: adapter factors always, backbone
/// matrices when they train. Importance weights, norms and the head never.
pub fn decays(key: ParamKey) -> bool {
    match key {
        ParamKey::Lora(_, _, LoraPart::W) => false,
        ParamKey::Lora(..) => true,
        ParamKey::Weight(..) | ParamKey::PatchProj | ParamKey::PosEmbed => true,
        _ => false,
    }
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `param` from its gradient. `step` must already count
    /// this update (see [`AdamW::begin_step`]).
    pub fn update<T: Real>(&mut self, key: ParamKey, param: &mut Tensor<T>, decay: bool) -> Result<()> {
        if !param.requires_grad() {
            return Ok(());
        }
        let n = param.numel();
        let (m, v) = self
            .moments
            .entry(key)
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let wd = if decay { self.lr * self.weight_decay } else { 0.0 };
        let (data, grad) = param.data_and_grad_mut();
        let Some(grad) = grad else {
            return Ok(());
        };
        for i in 0..n {
            let g = grad[i].as_f64();
            let p = data[i].as_f64();
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            data[i] = T::from_f64(p - wd * p - self.lr * mh / (vh.sqrt() + EPS));
            grad[i] = T::zero();
        }
        Ok(())
    }

    /// Per-coordinate step size `lr / (√v̂ + ε)` of `key` after the latest
    /// step; coordinates that never saw a gradient get 0.
    pub fn effective_lr(&self, key: ParamKey) -> Option<Vec<f64>> {
        let (_, v) = self.moments.get(&key)?;
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        Some(
            v.iter()
                .map(|&v| if v > 0.0 { self.lr / ((v / c2).sqrt() + EPS) } else { 0.0 })
                .collect(),
        )
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates every trainable tensor of `model`, then zeroes its gradient.
    /// A non-finite gradient aborts before anything changes.
    pub fn step_model<T: Real>(&mut self, model: &mut GlyphTransformer<T>) -> Result<()> {
        let mut finite = true;
        model.visit(|_, t| {
            if let Some(g) = t.grad() {
                finite &= g.iter().all(|v| v.is_finite());
            }
        });
        if !finite {
            return Err(Error::NanLoss {
                step: self.step as usize + 1,
            });
        }
        self.begin_step();
        let mut result = Ok(());
        model.visit_mut(|key, t| {
            if result.is_ok() {
                result = self.update(key, t, decays(key));
            }
        });
        result
    }
}
