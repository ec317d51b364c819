//! Convolutional restricted Boltzmann machine.
//!
//! Filters are shared across all spatial locations; there is one bias per
//! hidden channel and a single scalar bias shared by every visible unit.
//! With `alpha[i,j,k] = conv_valid(v, W)[i,j,k] + c_k`:
//!
//! - energy: `E(v,h) = -sum h .* conv(v,W) - sum_k c_k sum_ij h_k - b sum v`
//! - conditionals: `p(h|v) = sigma(alpha)`, `p(v|h) = sigma(conv_transpose(h,W) + b)`
//! - free energy: `F(v) = -b sum v - sum_{k,i,j} softplus(alpha[i,j,k])`
//!
//! The energy above is written for stride 1; for larger strides hidden site
//! (i, j) couples to the visible patch at origin (i*stride, j*stride). The
//! unrolling tests pin this semantics by mapping a conv layer onto the dense
//! RBM with the equivalent sparse weight matrix.
//!
//! Batched entry points take flat row-major `[M, H*W*C]` rows — the carrier
//! format every network layer exchanges — while single-state entry points
//! take shaped `[H, W, C]` tensors.

use crate::adam::AdamState;
use crate::conv::{
    conv_grad_filters_into, conv_transpose_into, conv_valid_into, ConvGeometry,
};
use crate::math::{sigmoid_scalar, softplus};
use crate::rng::RngStream;
use crate::tensor::{dot, Real, Tensor};
use crate::{Error, Result};
use rayon::prelude::*;

/// Rows per parallel accumulation chunk in the gradient pass; fixed so the
/// reduction order (and thus the bits) never depends on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvRbmParams {
    /// Filters, `[K, Nw, Nw, Cin]`.
    pub filters: Tensor,
    /// Single visible bias shared by all visible units.
    pub visible_bias: Real,
    /// One bias per hidden channel, `[K]`.
    pub hidden_bias: Tensor,
    pub stride: usize,
    /// Input geometry `[H, W, Cin]`.
    pub in_shape: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvRbmGrads {
    pub d_filters: Tensor,
    pub d_visible_bias: Real,
    pub d_hidden_bias: Tensor,
}

impl ConvRbmGrads {
    pub fn sub(&self, other: &ConvRbmGrads) -> Result<ConvRbmGrads> {
        Ok(ConvRbmGrads {
            d_filters: self.d_filters.sub(&other.d_filters)?,
            d_visible_bias: self.d_visible_bias - other.d_visible_bias,
            d_hidden_bias: self.d_hidden_bias.sub(&other.d_hidden_bias)?,
        })
    }
}

impl ConvRbmParams {
    pub fn zeros(geometry: ConvGeometry) -> ConvRbmParams {
        ConvRbmParams {
            filters: Tensor::zeros(&geometry.filter_shape()),
            visible_bias: 0.0,
            hidden_bias: Tensor::zeros(&[geometry.filters]),
            stride: geometry.stride,
            in_shape: geometry.in_shape(),
        }
    }

    /// Same init regime as the dense layer: filters N(0, 0.01^2), biases zero.
    pub fn init(geometry: ConvGeometry, rng: &mut RngStream) -> ConvRbmParams {
        ConvRbmParams {
            filters: Tensor::from_fn(&geometry.filter_shape(), |_| 0.01 * rng.normal() as Real),
            visible_bias: 0.0,
            hidden_bias: Tensor::zeros(&[geometry.filters]),
            stride: geometry.stride,
            in_shape: geometry.in_shape(),
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        // Parameters are only constructible with a valid geometry.
        ConvGeometry::new(
            self.in_shape,
            self.filters.shape()[0],
            self.filters.shape()[1],
            self.stride,
        )
        .expect("ConvRbmParams carries a validated geometry")
    }

    pub fn visible_len(&self) -> usize {
        self.in_shape.iter().product()
    }

    pub fn hidden_len(&self) -> usize {
        self.geometry().hidden_len()
    }

    fn check_single_visible(&self, v: &Tensor) -> Result<()> {
        if v.shape() != self.in_shape {
            return Err(Error::shape(format!(
                "conv visible state {:?}, layer wants {:?}",
                v.shape(),
                self.in_shape
            )));
        }
        Ok(())
    }

    fn check_rows(&self, t: &Tensor, width: usize, what: &str) -> Result<usize> {
        if t.rank() != 2 || t.shape()[1] != width {
            return Err(Error::shape(format!(
                "{what}: expected [n, {width}], got {:?}",
                t.shape()
            )));
        }
        Ok(t.shape()[0])
    }

    /// `E(v, h)` for a single joint state; `v` is `[H,W,C]`, `h` is `[H',W',K]`.
    pub fn energy(&self, v: &Tensor, h: &Tensor) -> Result<Real> {
        let g = self.geometry();
        self.check_single_visible(v)?;
        if h.shape() != g.out_shape() {
            return Err(Error::shape(format!(
                "conv hidden state {:?}, layer wants {:?}",
                h.shape(),
                g.out_shape()
            )));
        }
        let mut act = Tensor::zeros(&g.out_shape());
        conv_valid_into(&g, v.data(), self.filters.data(), act.data_mut());
        let coupling = dot(h.data(), act.data());
        let k = g.filters;
        let mut channel_sums = vec![0.0; k];
        for site in h.data().chunks(k) {
            for (cs, &hv) in channel_sums.iter_mut().zip(site) {
                *cs += hv;
            }
        }
        let bias_h = dot(&channel_sums, self.hidden_bias.data());
        Ok(-coupling - bias_h - self.visible_bias * v.sum())
    }

    /// `p(h[i,j,k] = 1 | v) = sigma(conv(v, W)[i,j,k] + c_k)` for one state.
    pub fn prob_h_given_v(&self, v: &Tensor) -> Result<Tensor> {
        self.check_single_visible(v)?;
        let g = self.geometry();
        let mut out = Tensor::zeros(&g.out_shape());
        self.hidden_probs_into(&g, v.data(), out.data_mut());
        Ok(out)
    }

    /// Batched [`Self::prob_h_given_v`] over flat rows: `[M, H*W*C] -> [M, H'*W'*K]`.
    pub fn prob_h_rows(&self, v: &Tensor) -> Result<Tensor> {
        let rows = self.check_rows(v, self.visible_len(), "conv prob_h_rows")?;
        let g = self.geometry();
        let (vl, hl) = (g.visible_len(), g.hidden_len());
        let mut out = Tensor::zeros(&[rows, hl]);
        let run = |(src, dst): (&[Real], &mut [Real])| self.hidden_probs_into(&g, src, dst);
        if rows > 1 && vl * hl >= 1 << 14 {
            v.data()
                .par_chunks(vl)
                .zip(out.data_mut().par_chunks_mut(hl))
                .for_each(run);
        } else {
            v.data()
                .chunks(vl)
                .zip(out.data_mut().chunks_mut(hl))
                .for_each(run);
        }
        Ok(out)
    }

    fn hidden_probs_into(&self, g: &ConvGeometry, v: &[Real], out: &mut [Real]) {
        conv_valid_into(g, v, self.filters.data(), out);
        let k = g.filters;
        for site in out.chunks_mut(k) {
            for (a, &c) in site.iter_mut().zip(self.hidden_bias.data()) {
                *a = sigmoid_scalar(*a + c);
            }
        }
    }

    /// `p(v[i,j,c] = 1 | h) = sigma(conv_transpose(h, W)[i,j,c] + b)` for one state.
    pub fn prob_v_given_h(&self, h: &Tensor) -> Result<Tensor> {
        let g = self.geometry();
        if h.shape() != g.out_shape() {
            return Err(Error::shape(format!(
                "conv hidden state {:?}, layer wants {:?}",
                h.shape(),
                g.out_shape()
            )));
        }
        let mut out = Tensor::zeros(&g.in_shape());
        self.visible_probs_into(&g, h.data(), out.data_mut());
        Ok(out)
    }

    /// Batched [`Self::prob_v_given_h`] over flat rows: `[M, H'*W'*K] -> [M, H*W*C]`.
    pub fn prob_v_rows(&self, h: &Tensor) -> Result<Tensor> {
        let rows = self.check_rows(h, self.hidden_len(), "conv prob_v_rows")?;
        let g = self.geometry();
        let (vl, hl) = (g.visible_len(), g.hidden_len());
        let mut out = Tensor::zeros(&[rows, vl]);
        let run = |(src, dst): (&[Real], &mut [Real])| self.visible_probs_into(&g, src, dst);
        if rows > 1 && vl * hl >= 1 << 14 {
            h.data()
                .par_chunks(hl)
                .zip(out.data_mut().par_chunks_mut(vl))
                .for_each(run);
        } else {
            h.data()
                .chunks(hl)
                .zip(out.data_mut().chunks_mut(vl))
                .for_each(run);
        }
        Ok(out)
    }

    fn visible_probs_into(&self, g: &ConvGeometry, h: &[Real], out: &mut [Real]) {
        conv_transpose_into(g, h, self.filters.data(), out);
        for x in out.iter_mut() {
            *x = sigmoid_scalar(*x + self.visible_bias);
        }
    }

    /// Free energy of one `[H,W,C]` visible state.
    pub fn free_energy(&self, v: &Tensor) -> Result<Real> {
        self.check_single_visible(v)?;
        let g = self.geometry();
        Ok(self.free_energy_slice(&g, v.data()))
    }

    /// Free energies over flat rows, returning `[M]`.
    pub fn free_energy_rows(&self, v: &Tensor) -> Result<Tensor> {
        let rows = self.check_rows(v, self.visible_len(), "conv free_energy_rows")?;
        let g = self.geometry();
        let vl = g.visible_len();
        let mut out = Tensor::zeros(&[rows]);
        if rows > 1 && vl * g.hidden_len() >= 1 << 14 {
            let values: Vec<Real> = v
                .data()
                .par_chunks(vl)
                .map(|row| self.free_energy_slice(&g, row))
                .collect();
            out.data_mut().copy_from_slice(&values);
        } else {
            for (dst, row) in out.data_mut().iter_mut().zip(v.data().chunks(vl)) {
                *dst = self.free_energy_slice(&g, row);
            }
        }
        Ok(out)
    }

    fn free_energy_slice(&self, g: &ConvGeometry, v: &[Real]) -> Real {
        let mut alpha = vec![0.0; g.hidden_len()];
        conv_valid_into(g, v, self.filters.data(), &mut alpha);
        let k = g.filters;
        let mut hidden_term = 0.0;
        for site in alpha.chunks(k) {
            for (&a, &c) in site.iter().zip(self.hidden_bias.data()) {
                hidden_term += softplus(a + c);
            }
        }
        -self.visible_bias * v.iter().sum::<Real>() - hidden_term
    }

    /// Batch-mean free-energy gradient over flat rows (or one `[H,W,C]` state):
    /// `dF/dW = -mean corr(v, sigma(alpha))`, `dF/db = -mean sum(v)`,
    /// `dF/dc_k = -mean sum_ij sigma(alpha)[i,j,k]`.
    pub fn free_energy_grad(&self, v: &Tensor) -> Result<ConvRbmGrads> {
        Ok(self.free_energy_and_grad(v)?.0)
    }

    /// Gradient plus the batch-mean free energy, sharing one conv pass.
    pub fn free_energy_and_grad(&self, v: &Tensor) -> Result<(ConvRbmGrads, Real)> {
        let g = self.geometry();
        let owned_row;
        let (rows, flat): (usize, &[Real]) = if v.rank() == 3 {
            self.check_single_visible(v)?;
            owned_row = v.clone();
            (1, owned_row.data())
        } else {
            let rows = self.check_rows(v, self.visible_len(), "conv free_energy_grad")?;
            (rows, v.data())
        };
        if rows == 0 {
            return Err(Error::InvalidArg("conv free_energy_grad: empty batch".into()));
        }
        let vl = g.visible_len();
        let k = g.filters;

        struct Partial {
            filters: Tensor,
            visible: Real,
            hidden: Vec<Real>,
            fe_sum: Real,
        }
        let accumulate = |chunk: &[Real]| {
            let mut part = Partial {
                filters: Tensor::zeros(&g.filter_shape()),
                visible: 0.0,
                hidden: vec![0.0; k],
                fe_sum: 0.0,
            };
            let mut alpha = vec![0.0; g.hidden_len()];
            for row in chunk.chunks(vl) {
                conv_valid_into(&g, row, self.filters.data(), &mut alpha);
                let row_sum = row.iter().sum::<Real>();
                part.fe_sum -= self.visible_bias * row_sum;
                for site in alpha.chunks_mut(k) {
                    for (a, &c) in site.iter_mut().zip(self.hidden_bias.data()) {
                        let pre = *a + c;
                        part.fe_sum -= softplus(pre);
                        *a = sigmoid_scalar(pre);
                    }
                }
                conv_grad_filters_into(&g, row, &alpha, part.filters.data_mut());
                part.visible += row_sum;
                for site in alpha.chunks(k) {
                    for (acc, &s) in part.hidden.iter_mut().zip(site) {
                        *acc += s;
                    }
                }
            }
            part
        };

        // Fixed-size chunks, combined in order: deterministic bits whatever
        // the thread count.
        let partials: Vec<Partial> = if rows > GRAD_CHUNK && vl * g.hidden_len() >= 1 << 14 {
            flat.par_chunks(GRAD_CHUNK * vl).map(accumulate).collect()
        } else {
            flat.chunks(GRAD_CHUNK * vl).map(accumulate).collect()
        };

        let inv_m = 1.0 / rows as Real;
        let mut d_filters = Tensor::zeros(&g.filter_shape());
        let mut d_visible = 0.0;
        let mut d_hidden = Tensor::zeros(&[k]);
        let mut fe_sum = 0.0;
        for part in partials {
            for (acc, &x) in d_filters.data_mut().iter_mut().zip(part.filters.data()) {
                *acc -= x * inv_m;
            }
            d_visible -= part.visible * inv_m;
            for (acc, &x) in d_hidden.data_mut().iter_mut().zip(&part.hidden) {
                *acc -= x * inv_m;
            }
            fe_sum += part.fe_sum;
        }
        Ok((
            ConvRbmGrads {
                d_filters,
                d_visible_bias: d_visible,
                d_hidden_bias: d_hidden,
            },
            fe_sum * inv_m,
        ))
    }

    /// Adam slots: filters, visible bias (as a 1-element tensor), channel biases.
    pub fn adam_state(&self) -> AdamState {
        AdamState::new(&[self.filters.shape(), &[1], self.hidden_bias.shape()])
    }
}
