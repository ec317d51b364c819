//! One network layer: a dense or convolutional RBM behind a common surface.
//!
//! Layers exchange flat row-major rows: a batch is always `[M, len]`, where a
//! conv layer's `len` is its `H*W*C` (visible) or `H'*W'*K` (hidden) extent
//! flattened in row-major order. That fixed order makes the conv-to-dense
//! junction a no-op.

use crate::adam::{AdamParams, AdamState};
use crate::conv_rbm::{ConvRbmGrads, ConvRbmParams};
use crate::rbm::{RbmGrads, RbmParams};
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(RbmParams),
    Conv(ConvRbmParams),
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrads {
    Dense(RbmGrads),
    Conv(ConvRbmGrads),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv(_) => "conv",
        }
    }

    pub fn visible_len(&self) -> usize {
        match self {
            Layer::Dense(p) => p.visible_len(),
            Layer::Conv(p) => p.visible_len(),
        }
    }

    pub fn hidden_len(&self) -> usize {
        match self {
            Layer::Dense(p) => p.hidden_len(),
            Layer::Conv(p) => p.hidden_len(),
        }
    }

    /// Weight entries only; biases excluded.
    pub fn weight_count(&self) -> u64 {
        match self {
            Layer::Dense(p) => p.weights.len() as u64,
            Layer::Conv(p) => p.filters.len() as u64,
        }
    }

    /// `p(hidden | visible)` over a `[M, visible_len]` batch.
    pub fn prob_h_rows(&self, v: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(p) => {
                check_rows(v, p.visible_len(), "dense prob_h")?;
                p.prob_h_given_v(v)
            }
            Layer::Conv(p) => p.prob_h_rows(v),
        }
    }

    /// `p(visible | hidden)` over a `[M, hidden_len]` batch.
    pub fn prob_v_rows(&self, h: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(p) => {
                check_rows(h, p.hidden_len(), "dense prob_v")?;
                p.prob_v_given_h(h)
            }
            Layer::Conv(p) => p.prob_v_rows(h),
        }
    }

    /// Free energy per batch row, `[M]`.
    pub fn free_energy_rows(&self, v: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(p) => {
                check_rows(v, p.visible_len(), "dense free_energy")?;
                p.free_energy_batch(v)
            }
            Layer::Conv(p) => p.free_energy_rows(v),
        }
    }

    /// Batch-mean free-energy gradient.
    pub fn free_energy_grad(&self, v: &Tensor) -> Result<LayerGrads> {
        Ok(match self {
            Layer::Dense(p) => LayerGrads::Dense(p.free_energy_grad(v)?),
            Layer::Conv(p) => LayerGrads::Conv(p.free_energy_grad(v)?),
        })
    }

    /// The PCD estimator for this layer: mean data-term gradient minus mean
    /// model-term gradient, both against the current parameters.
    pub fn pcd_grad(&self, data_rows: &Tensor, model_rows: &Tensor) -> Result<LayerGrads> {
        Ok(self.pcd_terms(data_rows, model_rows)?.0)
    }

    /// PCD gradient together with this layer's loss — the mean free-energy
    /// difference between the data batch and the particle batch. The loss's
    /// parameter gradient is exactly the returned estimator.
    pub fn pcd_terms(&self, data_rows: &Tensor, model_rows: &Tensor) -> Result<(LayerGrads, Real)> {
        match self {
            Layer::Dense(p) => {
                let (gd, fd) = p.free_energy_and_grad(data_rows)?;
                let (gm, fm) = p.free_energy_and_grad(model_rows)?;
                Ok((LayerGrads::Dense(gd.sub(&gm)?), fd - fm))
            }
            Layer::Conv(p) => {
                let (gd, fd) = p.free_energy_and_grad(data_rows)?;
                let (gm, fm) = p.free_energy_and_grad(model_rows)?;
                Ok((LayerGrads::Conv(gd.sub(&gm)?), fd - fm))
            }
        }
    }

    /// Joint energy of one flat (visible, hidden) state pair; conv states
    /// are reshaped from their flat rows.
    pub fn energy_flat(&self, v: &Tensor, h: &Tensor) -> Result<Real> {
        match self {
            Layer::Dense(p) => p.energy(v, h),
            Layer::Conv(p) => {
                let g = p.geometry();
                let v3 = v.clone().reshape(&g.in_shape())?;
                let h3 = h.clone().reshape(&g.out_shape())?;
                p.energy(&v3, &h3)
            }
        }
    }

    pub fn adam_state(&self) -> AdamState {
        match self {
            Layer::Dense(p) => p.adam_state(),
            Layer::Conv(p) => p.adam_state(),
        }
    }

    /// One Adam update from this layer's gradients. The conv visible bias is
    /// carried through the state as a 1-element slot.
    pub fn adam_apply(
        &mut self,
        grads: &LayerGrads,
        state: &mut AdamState,
        hyper: &AdamParams,
    ) -> Result<()> {
        match (self, grads) {
            (Layer::Dense(p), LayerGrads::Dense(g)) => state.step(
                hyper,
                &mut [&mut p.weights, &mut p.visible_bias, &mut p.hidden_bias],
                &[&g.d_weights, &g.d_visible_bias, &g.d_hidden_bias],
            ),
            (Layer::Conv(p), LayerGrads::Conv(g)) => {
                let mut b = Tensor::from_vec(&[1], vec![p.visible_bias])?;
                let gb = Tensor::from_vec(&[1], vec![g.d_visible_bias])?;
                state.step(
                    hyper,
                    &mut [&mut p.filters, &mut b, &mut p.hidden_bias],
                    &[&g.d_filters, &gb, &g.d_hidden_bias],
                )?;
                p.visible_bias = b.data()[0];
                Ok(())
            }
            (layer, _) => Err(Error::InvalidArg(format!(
                "gradient kind does not match {} layer",
                layer.kind_name()
            ))),
        }
    }
}

fn check_rows(t: &Tensor, width: usize, what: &str) -> Result<()> {
    if t.rank() != 2 || t.shape()[1] != width {
        return Err(Error::shape(format!(
            "{what}: expected [n, {width}], got {:?}",
            t.shape()
        )));
    }
    Ok(())
}
