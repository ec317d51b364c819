//! Strided valid convolution, its adjoint, and the filter-gradient kernel.
//!
//! Orientation is fixed as cross-correlation: no filter flip, so hidden
//! position (i, j) of channel k reads the visible patch whose top-left corner
//! is (i*stride, j*stride). Geometry is strict — no padding, and the filter
//! must tile the input exactly ((H - Nw) and (W - Nw) divisible by the
//! stride) — so layer shapes are always exact.
//!
//! Layouts (row-major): input `[H, W, C]`, filters `[K, Nw, Nw, C]`,
//! hidden `[H', W', K]`.

use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub filters: usize,
    pub filter_size: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn new(
        in_shape: [usize; 3],
        filters: usize,
        filter_size: usize,
        stride: usize,
    ) -> Result<ConvGeometry> {
        let g = ConvGeometry {
            in_h: in_shape[0],
            in_w: in_shape[1],
            in_c: in_shape[2],
            filters,
            filter_size,
            stride,
        };
        if g.in_h == 0 || g.in_w == 0 || g.in_c == 0 || g.filters == 0 || g.filter_size == 0 {
            return Err(Error::Geometry(format!("degenerate geometry {g:?}")));
        }
        if g.stride == 0 {
            return Err(Error::Geometry("stride must be >= 1".into()));
        }
        if g.filter_size > g.in_h || g.filter_size > g.in_w {
            return Err(Error::Geometry(format!(
                "filter {0}x{0} larger than input {1}x{2}",
                g.filter_size, g.in_h, g.in_w
            )));
        }
        if (g.in_h - g.filter_size) % g.stride != 0 || (g.in_w - g.filter_size) % g.stride != 0 {
            return Err(Error::Geometry(format!(
                "stride {} does not tile {}x{} input with {}x{} filter",
                g.stride, g.in_h, g.in_w, g.filter_size, g.filter_size
            )));
        }
        Ok(g)
    }

    pub fn out_h(&self) -> usize {
        (self.in_h - self.filter_size) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.filter_size) / self.stride + 1
    }

    pub fn in_shape(&self) -> [usize; 3] {
        [self.in_h, self.in_w, self.in_c]
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.out_h(), self.out_w(), self.filters]
    }

    pub fn visible_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    pub fn hidden_len(&self) -> usize {
        self.out_h() * self.out_w() * self.filters
    }

    pub fn filter_shape(&self) -> [usize; 4] {
        [self.filters, self.filter_size, self.filter_size, self.in_c]
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.in_shape() {
            return Err(Error::shape(format!(
                "conv input {:?}, geometry wants {:?}",
                input.shape(),
                self.in_shape()
            )));
        }
        Ok(())
    }

    fn check_hidden(&self, hidden: &Tensor) -> Result<()> {
        if hidden.shape() != self.out_shape() {
            return Err(Error::shape(format!(
                "conv hidden {:?}, geometry wants {:?}",
                hidden.shape(),
                self.out_shape()
            )));
        }
        Ok(())
    }
}

/// Geometry implied by an `[H,W,C]` input and `[K,Nw,Nw,C]` filter tensor.
fn infer_geometry(input: &Tensor, filters: &Tensor, stride: usize) -> Result<ConvGeometry> {
    if input.rank() != 3 {
        return Err(Error::shape(format!(
            "conv input must be rank-3 [H,W,C], got {:?}",
            input.shape()
        )));
    }
    if filters.rank() != 4 || filters.shape()[1] != filters.shape()[2] {
        return Err(Error::shape(format!(
            "filters must be [K,Nw,Nw,C], got {:?}",
            filters.shape()
        )));
    }
    if filters.shape()[3] != input.shape()[2] {
        return Err(Error::Geometry(format!(
            "input has {} channels, filters expect {}",
            input.shape()[2],
            filters.shape()[3]
        )));
    }
    ConvGeometry::new(
        [input.shape()[0], input.shape()[1], input.shape()[2]],
        filters.shape()[0],
        filters.shape()[1],
        stride,
    )
}

/// Valid cross-correlation: `out[i,j,k] = sum_{r,s,c} in[i*st+r, j*st+s, c] * f[k,r,s,c]`.
pub fn conv_valid(input: &Tensor, filters: &Tensor, stride: usize) -> Result<Tensor> {
    let g = infer_geometry(input, filters, stride)?;
    let mut out = Tensor::zeros(&g.out_shape());
    conv_valid_into(&g, input.data(), filters.data(), out.data_mut());
    Ok(out)
}

pub(crate) fn conv_valid_into(g: &ConvGeometry, input: &[Real], filters: &[Real], out: &mut [Real]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (nw, c, k) = (g.filter_size, g.in_c, g.filters);
    let frow = nw * c; // one filter row
    let filt_len = nw * frow;
    for i in 0..oh {
        for j in 0..ow {
            let obase = (i * ow + j) * k;
            for kk in 0..k {
                let f = &filters[kk * filt_len..(kk + 1) * filt_len];
                let mut acc = 0.0;
                for r in 0..nw {
                    let ibase = ((i * g.stride + r) * g.in_w + j * g.stride) * c;
                    let irow = &input[ibase..ibase + frow];
                    let frow_s = &f[r * frow..(r + 1) * frow];
                    for (iv, fv) in irow.iter().zip(frow_s) {
                        acc += iv * fv;
                    }
                }
                out[obase + kk] = acc;
            }
        }
    }
}

/// Adjoint of [`conv_valid`]: scatters each hidden activation back through
/// its filter. For all a, b: `dot(conv_valid(a), b) == dot(a, conv_transpose(b))`.
pub fn conv_transpose(hidden: &Tensor, filters: &Tensor, stride: usize) -> Result<Tensor> {
    if hidden.rank() != 3 {
        return Err(Error::shape(format!(
            "conv_transpose hidden must be rank-3 [H',W',K], got {:?}",
            hidden.shape()
        )));
    }
    if filters.rank() != 4 || filters.shape()[1] != filters.shape()[2] {
        return Err(Error::shape(format!(
            "filters must be [K,Nw,Nw,C], got {:?}",
            filters.shape()
        )));
    }
    if hidden.shape()[2] != filters.shape()[0] {
        return Err(Error::Geometry(format!(
            "hidden has {} channels, {} filters supplied",
            hidden.shape()[2],
            filters.shape()[0]
        )));
    }
    let nw = filters.shape()[1];
    let in_h = (hidden.shape()[0] - 1) * stride + nw;
    let in_w = (hidden.shape()[1] - 1) * stride + nw;
    let g = ConvGeometry::new(
        [in_h, in_w, filters.shape()[3]],
        filters.shape()[0],
        nw,
        stride,
    )?;
    g.check_hidden(hidden)?;
    let mut out = Tensor::zeros(&g.in_shape());
    conv_transpose_into(&g, hidden.data(), filters.data(), out.data_mut());
    Ok(out)
}

pub(crate) fn conv_transpose_into(
    g: &ConvGeometry,
    hidden: &[Real],
    filters: &[Real],
    out: &mut [Real],
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (nw, c, k) = (g.filter_size, g.in_c, g.filters);
    let frow = nw * c;
    let filt_len = nw * frow;
    for i in 0..oh {
        for j in 0..ow {
            let hbase = (i * ow + j) * k;
            for kk in 0..k {
                let hv = hidden[hbase + kk];
                if hv == 0.0 {
                    continue;
                }
                let f = &filters[kk * filt_len..(kk + 1) * filt_len];
                for r in 0..nw {
                    let obase = ((i * g.stride + r) * g.in_w + j * g.stride) * c;
                    let orow = &mut out[obase..obase + frow];
                    let frow_s = &f[r * frow..(r + 1) * frow];
                    for (ov, fv) in orow.iter_mut().zip(frow_s) {
                        *ov += hv * fv;
                    }
                }
            }
        }
    }
}

/// Adjoint with respect to the filters: correlates the input with an
/// upstream hidden-shaped signal. `out[k,r,s,c] = sum_{i,j} up[i,j,k] * in[i*st+r, j*st+s, c]`.
pub fn conv_grad_filters(input: &Tensor, upstream: &Tensor, stride: usize) -> Result<Tensor> {
    if input.rank() != 3 || upstream.rank() != 3 {
        return Err(Error::shape(format!(
            "conv_grad_filters wants rank-3 input/upstream, got {:?} / {:?}",
            input.shape(),
            upstream.shape()
        )));
    }
    let oh = upstream.shape()[0];
    let ow = upstream.shape()[1];
    let k = upstream.shape()[2];
    if oh == 0 || ow == 0 {
        return Err(Error::Geometry("empty upstream".into()));
    }
    // Solve Nw from the output extent; must land on the strict grid.
    let in_h = input.shape()[0];
    let span = (oh - 1) * stride;
    if span >= in_h {
        return Err(Error::Geometry(format!(
            "upstream extent {oh} with stride {stride} exceeds input height {in_h}"
        )));
    }
    let nw = in_h - span;
    let g = ConvGeometry::new(
        [in_h, input.shape()[1], input.shape()[2]],
        k,
        nw,
        stride,
    )?;
    g.check_input(input)?;
    g.check_hidden(upstream)?;
    let mut out = Tensor::zeros(&g.filter_shape());
    conv_grad_filters_into(&g, input.data(), upstream.data(), out.data_mut());
    Ok(out)
}

pub(crate) fn conv_grad_filters_into(
    g: &ConvGeometry,
    input: &[Real],
    upstream: &[Real],
    out: &mut [Real],
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (nw, c, k) = (g.filter_size, g.in_c, g.filters);
    let frow = nw * c;
    let filt_len = nw * frow;
    for i in 0..oh {
        for j in 0..ow {
            let hbase = (i * ow + j) * k;
            for kk in 0..k {
                let hv = upstream[hbase + kk];
                if hv == 0.0 {
                    continue;
                }
                let f = &mut out[kk * filt_len..(kk + 1) * filt_len];
                for r in 0..nw {
                    let ibase = ((i * g.stride + r) * g.in_w + j * g.stride) * c;
                    let irow = &input[ibase..ibase + frow];
                    let frow_s = &mut f[r * frow..(r + 1) * frow];
                    for (fv, iv) in frow_s.iter_mut().zip(irow) {
                        *fv += hv * iv;
                    }
                }
            }
        }
    }
}
