//! Decoupled-weight-decay adaptive optimizer with warmup + cosine schedule
//! and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{bail_contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over `warmup_frac` of total steps, then cosine decay to
    /// `min_lr_ratio * lr`.
    Cosine,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_frac: f64,
    pub min_lr_ratio: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        OptimizerHyper {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            warmup_frac: 0.03,
            min_lr_ratio: 0.1,
            schedule: LrSchedule::Cosine,
        }
    }
}

/// Serializable moment buffers, for checkpoint resume.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

pub struct AdamW<T: Scalar> {
    hyper: OptimizerHyper,
    params: Vec<Tensor<T>>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
    total_steps: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: Vec<Tensor<T>>, hyper: OptimizerHyper, total_steps: u64) -> Self {
        let m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        let v = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        AdamW {
            hyper,
            params,
            m,
            v,
            step: 0,
            total_steps: total_steps.max(1),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn current_lr(&self) -> f64 {
        let h = &self.hyper;
        match h.schedule {
            LrSchedule::Constant => h.lr,
            LrSchedule::Cosine => {
                let t = self.step as f64;
                let total = self.total_steps as f64;
                let warmup = (h.warmup_frac * total).max(1.0);
                if t < warmup {
                    h.lr * (t + 1.0) / warmup
                } else {
                    let progress = ((t - warmup) / (total - warmup).max(1.0)).min(1.0);
                    let min_lr = h.lr * h.min_lr_ratio;
                    min_lr
                        + 0.5 * (h.lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }

    /// Global gradient norm across all parameters (before clipping).
    pub fn grad_norm(&self) -> f64 {
        let mut ssq = 0.0;
        for p in &self.params {
            if let Some(g) = p.grad() {
                for &x in &g {
                    let x = x.to_f64();
                    ssq += x * x;
                }
            }
        }
        ssq.sqrt()
    }

    /// Applies one update from accumulated gradients, then clears them.
    /// The step counter increases by exactly one.
    pub fn step(&mut self) -> Result<()> {
        let h = self.hyper;
        let lr = self.current_lr();
        let norm = self.grad_norm();
        if !norm.is_finite() {
            bail_contract!("non-finite gradient norm {norm}");
        }
        let clip_coeff = if h.clip_norm > 0.0 && norm > h.clip_norm {
            h.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - h.beta1.powf(t);
        let bc2 = 1.0 - h.beta2.powf(t);
        for (i, p) in self.params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let mut data = p.data_mut();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..data.len() {
                let g = grad[j].to_f64() * clip_coeff;
                let mj = h.beta1 * m[j].to_f64() + (1.0 - h.beta1) * g;
                let vj = h.beta2 * v[j].to_f64() + (1.0 - h.beta2) * g * g;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let x = data[j].to_f64();
                let updated = x - lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * x);
                data[j] = T::from_f64(updated);
            }
            drop(data);
            p.zero_grad();
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn export_state(&self) -> OptimizerState<T> {
        OptimizerState {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    /// Restores moments saved by [`export_state`](Self::export_state); the
    /// buffers must match the current parameter set exactly.
    pub fn import_state(&mut self, state: OptimizerState<T>) -> Result<()> {
        if state.m.len() != self.params.len() || state.v.len() != self.params.len() {
            bail_contract!(
                "optimizer state has {} moment buffers for {} parameters",
                state.m.len(),
                self.params.len()
            );
        }
        for (buf, p) in state.m.iter().zip(&self.params) {
            if buf.len() != p.numel() {
                bail_contract!("moment buffer length {} != param {}", buf.len(), p.numel());
            }
        }
        self.m = state.m;
        self.v = state.v;
        self.step = state.step;
        Ok(())
    }
}
