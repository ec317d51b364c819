//! Scalar nonlinearities and Bernoulli sampling over tensors.

use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Numerically stable logistic function; never overflows for finite input.
pub fn sigmoid_scalar(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// log(1 + e^x) with the large-argument branch: for x >> 0 the result is x
/// exactly, for x << 0 it underflows to 0 instead of overflowing.
pub fn softplus(x: Real) -> Real {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of the logistic function expressed through its output.
pub fn sigmoid_deriv_from_output(p: Real) -> Real {
    p * (1.0 - p)
}

pub fn logsumexp(xs: &[Real]) -> Real {
    let m = xs.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    if !m.is_finite() {
        return m;
    }
    let s: Real = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

fn check_probabilities(p: &Tensor) -> Result<()> {
    if let Some(pos) = p.data().iter().position(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::InvalidArg(format!(
            "bernoulli_sample: probability {} at flat index {} is outside [0, 1]",
            p.data()[pos],
            pos
        )));
    }
    Ok(())
}

/// Element-wise Bernoulli draw; every element consumes one uniform from `rng`
/// in row-major order, so the call advances the stream deterministically.
pub fn bernoulli_sample(p: &Tensor, rng: &mut RngStream) -> Result<Tensor> {
    check_probabilities(p)?;
    let mut out = Tensor::zeros(p.shape());
    for (dst, &prob) in out.data_mut().iter_mut().zip(p.data()) {
        *dst = if rng.bernoulli(prob as f64) { 1.0 } else { 0.0 };
    }
    Ok(out)
}

/// Like [`bernoulli_sample`] but row `i` of `p` draws from `streams[i]`,
/// keeping parallel chains reproducible independently of one another.
pub fn bernoulli_sample_rows(p: &Tensor, streams: &mut [RngStream]) -> Result<Tensor> {
    check_probabilities(p)?;
    if p.rank() < 2 || p.shape()[0] != streams.len() {
        return Err(Error::shape(format!(
            "bernoulli_sample_rows: {} streams for probability shape {:?}",
            streams.len(),
            p.shape()
        )));
    }
    let row_len = p.len() / p.shape()[0];
    let mut out = Tensor::zeros(p.shape());
    for (i, stream) in streams.iter_mut().enumerate() {
        let src = &p.data()[i * row_len..(i + 1) * row_len];
        let dst = &mut out.data_mut()[i * row_len..(i + 1) * row_len];
        for (d, &prob) in dst.iter_mut().zip(src) {
            *d = if stream.bernoulli(prob as f64) { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}
