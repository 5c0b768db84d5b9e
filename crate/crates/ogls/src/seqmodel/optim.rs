//! Adam-style optimizer: per-parameter second-moment scaling, decoupled
//! weight decay off by default.

use super::{GradientBuffer, ModelParams};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradients contained a nonfinite value; parameters and moments were
    /// left untouched.
    RejectedNonFinite,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> AdamState {
        let mut m = Vec::new();
        params.visit(&mut |_, view| m.push(ArrayD::zeros(view.raw_dim())));
        let v = m.clone();
        AdamState { m, v, t: 0 }
    }

    /// One optimizer step. Deterministic; rejects nonfinite gradients.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &GradientBuffer,
        cfg: &OptimConfig,
    ) -> StepOutcome {
        assert_eq!(grads.tensors.len(), self.m.len(), "gradient tensor count mismatch");
        if !grads.is_finite() {
            return StepOutcome::RejectedNonFinite;
        }
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        let mut idx = 0;
        params.visit_mut(&mut |_, mut view| {
            let g = &grads.tensors[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            m.zip_mut_with(g, |mi, &gi| *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi);
            let mut flat = view.iter_mut();
            for (mi, vi) in m.iter().zip(v.iter()) {
                let p = flat.next().unwrap();
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *p -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
            }
            idx += 1;
        });
        StepOutcome::Applied
    }
}
