//! Adam optimizer with a stepped learning-rate schedule.

use crate::error::Error;
use crate::nn::Tensor;
use crate::Result;

/// Default first-moment decay.
pub const BETA1: f64 = 0.9;
/// Default second-moment decay.
pub const BETA2: f64 = 0.999;
/// Default denominator guard.
pub const EPS: f64 = 1e-8;

/// Learning rate halved every 50 epochs.
pub fn scheduled_lr(base: f64, epoch: usize) -> f64 {
    base * 0.5f64.powi((epoch / 50) as i32)
}

/// Optimizer moments, aligned index-for-index with the model's named
/// parameter registry.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update count.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Fresh zero moments for the given parameter tensors.
    pub fn new(params: &[&Tensor]) -> AdamState {
        AdamState {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            step: 0,
            m: params.iter().map(|t| t.zeros_like()).collect(),
            v: params.iter().map(|t| t.zeros_like()).collect(),
        }
    }

    /// Restores a state from checkpointed parts, validating the shapes
    /// against the registry.
    pub fn from_parts(
        step: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        params: &[&Tensor],
    ) -> Result<AdamState> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state holds {} moment pairs, model has {} tensors",
                m.len(),
                params.len()
            )));
        }
        for ((mm, vv), p) in m.iter().zip(&v).zip(params) {
            if mm.shape != p.shape || vv.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "optimizer moment shaped {:?}/{:?} against parameter {:?}",
                    mm.shape, vv.shape, p.shape
                )));
            }
        }
        Ok(AdamState {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            step,
            m,
            v,
        })
    }

    /// One bias-corrected update over the registry, in place.
    pub fn update(&mut self, lr: f64, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        assert_eq!(params.len(), self.m.len(), "registry drifted from state");
        assert_eq!(grads.len(), self.m.len(), "gradients drifted from state");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            assert_eq!(p.shape, m.shape, "parameter shape drifted from state");
            assert_eq!(g.shape, m.shape, "gradient shape drifted from state");
            for ((pv, &gv), (mv, vv)) in p
                .data
                .iter_mut()
                .zip(&g.data)
                .zip(m.data.iter_mut().zip(&mut v.data))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
