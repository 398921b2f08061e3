//! Bias-corrected Adam with global-norm gradient clipping and per-parameter
//! learning-rate multipliers (used for layer-wise decay).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            eps: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

/// Optimizer state: one moment pair per parameter, in parameter order.
pub struct AdamState {
    hyper: AdamHyper,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor<f32>], hyper: AdamHyper) -> Self {
        AdamState {
            hyper,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all parameters. `lrs[i]` is the full learning rate for
    /// parameter `i` (schedule times layer multiplier); `active[i] == false`
    /// freezes the parameter (no update, moments untouched, gradient excluded
    /// from the clip norm). `clip > 0` rescales gradients so their global L2
    /// norm is at most `clip`.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<f32>],
        grads: &[Tensor<f32>],
        lrs: &[f64],
        active: &[bool],
        clip: f64,
    ) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), lrs.len());
        assert_eq!(params.len(), active.len());
        self.t += 1;

        let mut sq_sum = 0.0f64;
        for (i, g) in grads.iter().enumerate() {
            if !active[i] {
                continue;
            }
            for &x in g.data() {
                sq_sum += f64::from(x) * f64::from(x);
            }
        }
        if !sq_sum.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient",
                step: self.t,
            });
        }
        let norm = sq_sum.sqrt();
        let rescale = if clip > 0.0 && norm > clip {
            (clip / norm) as f32
        } else {
            1.0
        };

        let b1 = self.hyper.beta1 as f32;
        let b2 = self.hyper.beta2 as f32;
        let eps = self.hyper.eps as f32;
        let bc1 = 1.0 - (self.hyper.beta1).powi(self.t as i32);
        let bc2 = 1.0 - (self.hyper.beta2).powi(self.t as i32);

        for i in 0..params.len() {
            if !active[i] {
                continue;
            }
            let lr = lrs[i];
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            debug_assert_eq!(p.len(), grads[i].numel(), "gradient shape drifted");
            for (j, &graw) in grads[i].data().iter().enumerate() {
                let g = graw * rescale;
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = f64::from(m[j]) / bc1;
                let v_hat = f64::from(v[j]) / bc2;
                p[j] -= (lr * m_hat / (v_hat.sqrt() + f64::from(eps))) as f32;
            }
        }
        Ok(())
    }
}

/// Learning rate at `step` (1-based) for linear warmup to `lr` over
/// `warmup` steps followed by linear decay to zero at `total`.
pub fn warmup_linear_decay(lr: f64, step: u64, warmup: u64, total: u64) -> f64 {
    if warmup > 0 && step <= warmup {
        return lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr;
    }
    let remaining = total.saturating_sub(step) as f64;
    lr * (remaining / (total - warmup) as f64).max(0.0)
}
