//! Adam optimizer with bias correction.

use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub step_size: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_step_size(step_size: Real) -> Self {
        AdamParams {
            step_size,
            ..Default::default()
        }
    }
}

/// First/second-moment accumulators for one parameter set. The slots are
/// positional: callers pass parameters and gradients in the same fixed order
/// every step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]]) -> AdamState {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn slots(&self) -> usize {
        self.m.len()
    }

    /// Moment tensors, exposed for checkpointing.
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Rebuilds a state from checkpointed moments.
    pub fn from_parts(m: Vec<Tensor>, v: Vec<Tensor>, t: u64) -> Result<AdamState> {
        if m.len() != v.len() {
            return Err(Error::shape(format!(
                "adam state: {} first-moment slots vs {} second-moment slots",
                m.len(),
                v.len()
            )));
        }
        for (a, b) in m.iter().zip(&v) {
            if a.shape() != b.shape() {
                return Err(Error::shape(format!(
                    "adam state: moment shapes {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(AdamState { m, v, t })
    }

    /// One Adam update over all slots. `params[i]` and `grads[i]` must match
    /// the shape the state was created with.
    pub fn step(
        &mut self,
        hyper: &AdamParams,
        params: &mut [&mut Tensor],
        grads: &[&Tensor],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam step: {} params / {} grads for {} slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for i in 0..params.len() {
            if params[i].shape() != self.m[i].shape() || grads[i].shape() != self.m[i].shape() {
                return Err(Error::shape(format!(
                    "adam slot {i}: param {:?}, grad {:?}, state {:?}",
                    params[i].shape(),
                    grads[i].shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - hyper.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hyper.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            let g = grads[i].data();
            for j in 0..p.len() {
                m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
                v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= hyper.step_size * m_hat / (v_hat.sqrt() + hyper.epsilon);
            }
        }
        Ok(())
    }
}
