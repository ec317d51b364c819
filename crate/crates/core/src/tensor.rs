//! Row-major dense tensors and the matrix kernels built on them.
//!
//! `Tensor` is the universal value carrier of the crate: unit states, weight
//! arrays, probability maps and minibatches are all tensors. Storage is a
//! flat `Vec<Real>` in row-major order; the last axis varies fastest.

use crate::{Error, Result};
use rayon::prelude::*;

/// Working precision: `f64` by default, `f32` when the crate is built with
/// the `f32` feature. All tolerance-critical tests assume the default.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Matrix products below this many multiply-adds stay single-threaded.
const PAR_FLOP_THRESHOLD: usize = 1 << 17;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: Real) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<Real>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor by calling `f` with each flat (row-major) index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> Real) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} values into {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Number of rows when the tensor is viewed as a matrix (rank 2).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Row length of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Borrow row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[Real] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [Real] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(Real, Real) -> Real) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: Real) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> Real {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as Real
        }
    }

    /// Population variance over all elements.
    pub fn variance(&self) -> Real {
        if self.data.is_empty() {
            return 0.0;
        }
        let m = self.mean();
        self.data.iter().map(|&x| (x - m) * (x - m)).sum::<Real>() / self.data.len() as Real
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Real {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, Real::max)
    }

    /// Copies the listed rows of a rank-2 tensor into a new tensor.
    pub fn gather_rows(&self, indices: &[u32]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape(format!(
                "gather_rows needs a rank-2 tensor, got {:?}",
                self.shape
            )));
        }
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            let i = i as usize;
            if i >= self.rows() {
                return Err(Error::InvalidArg(format!(
                    "row index {} out of range (n = {})",
                    i,
                    self.rows()
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::from_vec(&[indices.len(), c], data)
    }

    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArg(format!(
                "{context}: non-finite value {} at flat index {pos}",
                self.data[pos]
            )));
        }
        Ok(())
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = mat_dims(self, "matmul lhs")?;
        let (kb, n) = mat_dims(b, "matmul rhs")?;
        if k != kb {
            return Err(Error::shape(format!(
                "matmul: lhs is {m}x{k}, rhs is {kb}x{n}"
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_slices(&self.data, m, k, &b.data, n, &mut out.data);
        Ok(out)
    }

    /// `[m,k] x [n,k]^T -> [m,n]` without materializing the transpose.
    pub fn matmul_bt(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = mat_dims(self, "matmul_bt lhs")?;
        let (n, kb) = mat_dims(b, "matmul_bt rhs")?;
        if k != kb {
            return Err(Error::shape(format!(
                "matmul_bt: lhs is {m}x{k}, rhs is {n}x{kb}"
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_bt_slices(&self.data, m, k, &b.data, n, &mut out.data);
        Ok(out)
    }

    /// `[m,k]^T x [m,n] -> [k,n]` without materializing the transpose.
    pub fn matmul_at(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = mat_dims(self, "matmul_at lhs")?;
        let (mb, n) = mat_dims(b, "matmul_at rhs")?;
        if m != mb {
            return Err(Error::shape(format!(
                "matmul_at: lhs is {m}x{k}, rhs is {mb}x{n}"
            )));
        }
        let mut out = Tensor::zeros(&[k, n]);
        matmul_at_slices(&self.data, m, k, &b.data, n, &mut out.data);
        Ok(out)
    }
}

fn mat_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(format!(
            "{what}: expected a rank-2 tensor, got shape {:?}",
            t.shape
        )));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// C[m,n] += A[m,k] * B[k,n]; ikj loop order so inner writes are contiguous.
pub(crate) fn matmul_slices(a: &[Real], m: usize, k: usize, b: &[Real], n: usize, c: &mut [Real]) {
    let body = |i: usize, crow: &mut [Real]| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue; // binary states make lhs sparse in practice
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
}

/// C[m,n] = A[m,k] * B[n,k]^T; each output element is a contiguous dot.
pub(crate) fn matmul_bt_slices(
    a: &[Real],
    m: usize,
    k: usize,
    b: &[Real],
    n: usize,
    c: &mut [Real],
) {
    let body = |i: usize, crow: &mut [Real]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv = acc;
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
}

/// C[k,n] = A[m,k]^T * B[m,n]; accumulates row m of B scaled by A[m,d].
pub(crate) fn matmul_at_slices(
    a: &[Real],
    m: usize,
    k: usize,
    b: &[Real],
    n: usize,
    c: &mut [Real],
) {
    let body = |d: usize, crow: &mut [Real]| {
        for i in 0..m {
            let av = a[i * k + d];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && k > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(d, crow)| body(d, crow));
    } else {
        for (d, crow) in c.chunks_mut(n).enumerate() {
            body(d, crow);
        }
    }
}

pub fn dot(a: &[Real], b: &[Real]) -> Real {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    /// Independent triple-loop reference for all three product kernels.
    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.rows(), a.cols());
        let n = b.cols();
        let mut c = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                c.data_mut()[i * n + j] = acc;
            }
        }
        c
    }

    fn random_matrix(m: usize, n: usize, rng: &mut RngStream) -> Tensor {
        Tensor::from_fn(&[m, n], |_| rng.uniform01() as Real * 2.0 - 1.0)
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut rng = RngStream::from_seed(11);
        for _ in 0..5 {
            let a = random_matrix(16, 16, &mut rng);
            let b = random_matrix(16, 16, &mut rng);
            let fast = a.matmul(&b).unwrap();
            let slow = naive_matmul(&a, &b);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn transposed_variants_match_naive_oracle() {
        let mut rng = RngStream::from_seed(12);
        let a = random_matrix(7, 5, &mut rng);
        let b = random_matrix(9, 5, &mut rng);
        // a * b^T
        let bt = Tensor::from_fn(&[5, 9], |i| {
            let (r, c) = (i / 9, i % 9);
            b.data()[c * 5 + r]
        });
        assert!(a.matmul_bt(&b).unwrap().max_abs_diff(&naive_matmul(&a, &bt)) < 1e-12);
        // a^T * c
        let c = random_matrix(7, 4, &mut rng);
        let at = Tensor::from_fn(&[5, 7], |i| {
            let (r, q) = (i / 7, i % 7);
            a.data()[q * 5 + r]
        });
        assert!(a.matmul_at(&c).unwrap().max_abs_diff(&naive_matmul(&at, &c)) < 1e-12);
    }

    #[test]
    fn parallel_path_is_bitwise_equal_to_serial() {
        // Big enough to cross PAR_FLOP_THRESHOLD.
        let mut rng = RngStream::from_seed(13);
        let a = random_matrix(64, 80, &mut rng);
        let b = random_matrix(80, 96, &mut rng);
        let par = a.matmul(&b).unwrap();
        let mut serial = Tensor::zeros(&[64, 96]);
        for i in 0..64 {
            for p in 0..80 {
                let av = a.data()[i * 80 + p];
                for j in 0..96 {
                    serial.data_mut()[i * 96 + j] += av * b.data()[p * 96 + j];
                }
            }
        }
        assert_eq!(par, serial);
    }

    #[test]
    fn shape_errors_are_reported() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::zeros(&[4]).reshape(&[3]).is_err());
    }

    #[test]
    fn gather_rows_copies_and_validates() {
        let t = Tensor::from_vec(&[3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let g = t.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert!(t.gather_rows(&[3]).is_err());
    }
}
