//! Dense binary restricted Boltzmann machine.
//!
//! A layer over visible units `v in {0,1}^D` and hidden units `h in {0,1}^P`
//! with energy `E(v,h) = -b'v - c'h - v'Wh`. Because the graph is bipartite,
//! both conditionals factorize into per-unit logistics, and the hidden sum in
//! the free energy has the closed form
//! `F(v) = -b'v - sum_j softplus(c_j + (v'W)_j)`.
//!
//! Conditionals accept real-valued inputs in [0,1] (not only binary states)
//! so probability passes can propagate activations without sampling.

use crate::adam::AdamState;
use crate::math::{bernoulli_sample, sigmoid_scalar, softplus};
use crate::rng::RngStream;
use crate::tensor::{dot, matmul_at_slices, matmul_bt_slices, matmul_slices, Real, Tensor};
use crate::{Error, Result};

/// Largest `D + P` for which exhaustive enumeration is allowed.
pub const ENUMERATION_LIMIT: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct RbmParams {
    /// Visible-to-hidden weights, `[D, P]`.
    pub weights: Tensor,
    /// Visible biases, `[D]`.
    pub visible_bias: Tensor,
    /// Hidden biases, `[P]`.
    pub hidden_bias: Tensor,
}

/// Free-energy gradients shaped like [`RbmParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct RbmGrads {
    pub d_weights: Tensor,
    pub d_visible_bias: Tensor,
    pub d_hidden_bias: Tensor,
}

impl RbmGrads {
    pub fn sub(&self, other: &RbmGrads) -> Result<RbmGrads> {
        Ok(RbmGrads {
            d_weights: self.d_weights.sub(&other.d_weights)?,
            d_visible_bias: self.d_visible_bias.sub(&other.d_visible_bias)?,
            d_hidden_bias: self.d_hidden_bias.sub(&other.d_hidden_bias)?,
        })
    }
}

/// Resolves a state tensor to (rows, is_single) against an expected width.
fn as_batch(t: &Tensor, width: usize, what: &str) -> Result<(usize, bool)> {
    match t.rank() {
        1 if t.len() == width => Ok((1, true)),
        2 if t.shape()[1] == width => Ok((t.shape()[0], false)),
        _ => Err(Error::shape(format!(
            "{what}: expected [{width}] or [n, {width}], got {:?}",
            t.shape()
        ))),
    }
}

impl RbmParams {
    pub fn zeros(visible: usize, hidden: usize) -> RbmParams {
        RbmParams {
            weights: Tensor::zeros(&[visible, hidden]),
            visible_bias: Tensor::zeros(&[visible]),
            hidden_bias: Tensor::zeros(&[hidden]),
        }
    }

    /// Standard init: weights N(0, 0.01^2), biases zero. Keeps initial free
    /// energies near `-P log 2`.
    pub fn init(visible: usize, hidden: usize, rng: &mut RngStream) -> RbmParams {
        RbmParams {
            weights: Tensor::from_fn(&[visible, hidden], |_| 0.01 * rng.normal() as Real),
            visible_bias: Tensor::zeros(&[visible]),
            hidden_bias: Tensor::zeros(&[hidden]),
        }
    }

    pub fn visible_len(&self) -> usize {
        self.visible_bias.len()
    }

    pub fn hidden_len(&self) -> usize {
        self.hidden_bias.len()
    }

    /// `E(v, h) = -b'v - c'h - v'Wh` for a single joint state.
    pub fn energy(&self, v: &Tensor, h: &Tensor) -> Result<Real> {
        let (d, p) = (self.visible_len(), self.hidden_len());
        if v.len() != d || v.rank() > 2 || h.len() != p || h.rank() > 2 {
            return Err(Error::shape(format!(
                "energy: v {:?} h {:?} for a {d}x{p} model",
                v.shape(),
                h.shape()
            )));
        }
        let mut coupling = 0.0;
        for (i, &vi) in v.data().iter().enumerate() {
            if vi != 0.0 {
                coupling += vi * dot(self.weights.row(i), h.data());
            }
        }
        Ok(-dot(self.visible_bias.data(), v.data()) - dot(self.hidden_bias.data(), h.data())
            - coupling)
    }

    /// Pre-sigmoid hidden activations `vW + c`, batched. `[M,D] -> [M,P]`.
    fn hidden_activations(&self, v: &Tensor, rows: usize) -> Tensor {
        let (d, p) = (self.visible_len(), self.hidden_len());
        let mut act = Tensor::zeros(&[rows, p]);
        matmul_slices(v.data(), rows, d, self.weights.data(), p, act.data_mut());
        for r in 0..rows {
            let row = act.row_mut(r);
            for (a, &c) in row.iter_mut().zip(self.hidden_bias.data()) {
                *a += c;
            }
        }
        act
    }

    /// `p(h_j = 1 | v) = sigma((v'W)_j + c_j)`; shape-preserving over a
    /// single state `[D]` or a batch `[M, D]`.
    pub fn prob_h_given_v(&self, v: &Tensor) -> Result<Tensor> {
        let (rows, single) = as_batch(v, self.visible_len(), "prob_h_given_v")?;
        let mut act = self.hidden_activations(v, rows);
        for x in act.data_mut() {
            *x = sigmoid_scalar(*x);
        }
        if single {
            act.reshape(&[self.hidden_len()])
        } else {
            Ok(act)
        }
    }

    /// `p(v_i = 1 | h) = sigma((Wh)_i + b_i)`; shape-preserving like
    /// [`Self::prob_h_given_v`].
    pub fn prob_v_given_h(&self, h: &Tensor) -> Result<Tensor> {
        let (rows, single) = as_batch(h, self.hidden_len(), "prob_v_given_h")?;
        let (d, p) = (self.visible_len(), self.hidden_len());
        let mut act = Tensor::zeros(&[rows, d]);
        matmul_bt_slices(h.data(), rows, p, self.weights.data(), d, act.data_mut());
        for r in 0..rows {
            let row = act.row_mut(r);
            for (a, &b) in row.iter_mut().zip(self.visible_bias.data()) {
                *a = sigmoid_scalar(*a + b);
            }
        }
        if single {
            act.reshape(&[d])
        } else {
            Ok(act)
        }
    }

    /// Closed-form free energy of a single visible state.
    pub fn free_energy(&self, v: &Tensor) -> Result<Real> {
        let fe = self.free_energy_batch(v)?;
        Ok(fe.data()[0])
    }

    /// Free energies of a batch of visible states; returns `[M]`.
    pub fn free_energy_batch(&self, v: &Tensor) -> Result<Tensor> {
        let (rows, _) = as_batch(v, self.visible_len(), "free_energy")?;
        let act = self.hidden_activations(v, rows);
        let d = self.visible_len();
        let mut out = Tensor::zeros(&[rows]);
        for r in 0..rows {
            let x = &v.data()[r * d..(r + 1) * d];
            let hidden_term: Real = act.row(r).iter().map(|&a| softplus(a)).sum();
            out.data_mut()[r] = -dot(self.visible_bias.data(), x) - hidden_term;
        }
        Ok(out)
    }

    /// Mean over the batch of `dF/dtheta`:
    /// `dF/db = -v`, `dF/dc_j = -sigma(a_j)`, `dF/dW_ij = -v_i sigma(a_j)`
    /// with `a = v'W + c`.
    pub fn free_energy_grad(&self, v: &Tensor) -> Result<RbmGrads> {
        Ok(self.free_energy_and_grad(v)?.0)
    }

    /// Gradient plus the batch-mean free energy, sharing one activation pass.
    pub fn free_energy_and_grad(&self, v: &Tensor) -> Result<(RbmGrads, Real)> {
        let (rows, _) = as_batch(v, self.visible_len(), "free_energy_grad")?;
        if rows == 0 {
            return Err(Error::InvalidArg("free_energy_grad: empty batch".into()));
        }
        let (d, p) = (self.visible_len(), self.hidden_len());
        let mut s = self.hidden_activations(v, rows);
        let mut fe_sum = 0.0;
        for r in 0..rows {
            let x = &v.data()[r * d..(r + 1) * d];
            fe_sum -= dot(self.visible_bias.data(), x);
        }
        for x in s.data_mut() {
            fe_sum -= softplus(*x);
            *x = sigmoid_scalar(*x);
        }
        let inv_m = 1.0 / rows as Real;
        let mut d_weights = Tensor::zeros(&[d, p]);
        matmul_at_slices(v.data(), rows, d, s.data(), p, d_weights.data_mut());
        for x in d_weights.data_mut() {
            *x *= -inv_m;
        }
        let mut d_visible = Tensor::zeros(&[d]);
        for r in 0..rows {
            let x = &v.data()[r * d..(r + 1) * d];
            for (acc, &xv) in d_visible.data_mut().iter_mut().zip(x) {
                *acc -= xv * inv_m;
            }
        }
        let mut d_hidden = Tensor::zeros(&[p]);
        for r in 0..rows {
            for (acc, &sv) in d_hidden.data_mut().iter_mut().zip(s.row(r)) {
                *acc -= sv * inv_m;
            }
        }
        Ok((
            RbmGrads {
                d_weights,
                d_visible_bias: d_visible,
                d_hidden_bias: d_hidden,
            },
            fe_sum * inv_m,
        ))
    }

    /// One block Gibbs step `v -> h -> v'`. Returns the hidden sample, the
    /// new visible sample, and the visible probability it was drawn from
    /// (the probability is what image output uses on a final step).
    pub fn gibbs_step(&self, v: &Tensor, rng: &mut RngStream) -> Result<(Tensor, Tensor, Tensor)> {
        let ph = self.prob_h_given_v(v)?;
        let h = bernoulli_sample(&ph, rng)?;
        let pv = self.prob_v_given_h(&h)?;
        let v_next = bernoulli_sample(&pv, rng)?;
        Ok((h, v_next, pv))
    }

    /// Mean log-likelihood of `data` (rows of visible states) with the
    /// partition function computed by exhaustive enumeration over visible
    /// states. Test oracle; guarded to small models.
    pub fn exact_log_likelihood(&self, data: &Tensor) -> Result<Real> {
        let (d, p) = (self.visible_len(), self.hidden_len());
        if d + p > ENUMERATION_LIMIT {
            return Err(Error::TooLarge(format!(
                "D + P = {} exceeds the enumeration limit {ENUMERATION_LIMIT}",
                d + p
            )));
        }
        let (rows, _) = as_batch(data, d, "exact_log_likelihood")?;
        if rows == 0 {
            return Err(Error::InvalidArg("exact_log_likelihood: empty data".into()));
        }
        let log_z = self.log_partition()?;
        let fe = self.free_energy_batch(data)?;
        Ok(fe.data().iter().map(|&f| -f - log_z).sum::<Real>() / rows as Real)
    }

    /// `log Z` by enumerating all `2^D` visible states through the free
    /// energy (the hidden sum is already analytic).
    pub fn log_partition(&self) -> Result<Real> {
        let (d, p) = (self.visible_len(), self.hidden_len());
        if d + p > ENUMERATION_LIMIT {
            return Err(Error::TooLarge(format!(
                "D + P = {} exceeds the enumeration limit {ENUMERATION_LIMIT}",
                d + p
            )));
        }
        let mut state = Tensor::zeros(&[d]);
        let mut terms = Vec::with_capacity(1usize << d);
        for u in 0..(1u32 << d) {
            for i in 0..d {
                state.data_mut()[i] = ((u >> i) & 1) as Real;
            }
            terms.push(-self.free_energy(&state)?);
        }
        Ok(crate::math::logsumexp(&terms))
    }

    /// Adam state shaped like this parameter set (slots: W, b, c).
    pub fn adam_state(&self) -> AdamState {
        AdamState::new(&[
            self.weights.shape(),
            self.visible_bias.shape(),
            self.hidden_bias.shape(),
        ])
    }
}
