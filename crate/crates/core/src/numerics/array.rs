use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f64` tensor.
///
/// Extents are strictly positive; a zero-length shape denotes a scalar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_extents(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl Array {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_extents(shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("{} elements supplied", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics on a zero extent; for internal shapes already known valid.
    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_extents(shape).expect("positive extents");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = check_extents(shape).expect("positive extents");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |k| if k / n == k % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&e| e == 1)
    }

    /// Value of a one-element array.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, found shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &e)| {
            debug_assert!(i < e);
            acc * e + i
        })
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    /// Element `(r, c)` of a 2-D array.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Array> {
        let n = check_extents(shape)?;
        if n != self.data.len() {
            return Err(Error::mismatch("reshape", &self.shape, shape));
        }
        Ok(Array {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Array, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        if self.shape != other.shape {
            return Err(Error::mismatch(op, &self.shape, &other.shape));
        }
        Ok(Array {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Array) -> Result<Array> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Array) -> Result<Array> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Array) -> Result<Array> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Array {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// In-place `self += k * other`.
    pub fn axpy(&mut self, k: f64, other: &Array) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::mismatch("axpy", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Array) -> Result<Array> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::mismatch("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, false);
        Ok(Array {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Array> {
        if self.ndim() != 2 {
            return Err(Error::Contract(format!(
                "transpose needs a 2-D array, found {:?}",
                self.shape
            )));
        }
        self.permute(&[1, 0])
    }

    /// Reorders the axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Array> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Contract(format!(
                "invalid permutation {axes:?} for shape {:?}",
                self.shape
            )));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        permute_into(&self.data, &out_shape, &src_strides, &mut out);
        Ok(Array {
            shape: out_shape,
            data: out,
        })
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` in the order given by `out_shape` walked with `src_strides`.
pub(crate) fn permute_into(src: &[f64], out_shape: &[usize], src_strides: &[usize], out: &mut Vec<f64>) {
    let nd = out_shape.len();
    if nd == 0 {
        out.push(src[0]);
        return;
    }
    // The innermost axis is copied in a tight loop; outer axes by odometer.
    let inner = out_shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    let outer: usize = out_shape[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd - 1];
    let mut base = 0usize;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        }
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// `c (+)= op(a) · op(b)` for row-major operands, where `op` optionally
/// transposes. `a` is logically `m×k`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every operand length to the logical
    // dimensions, and the strides address exactly those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
