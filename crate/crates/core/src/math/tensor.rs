//! Dense row-major tensors of rank 1 or 2.
//!
//! Eager kernels live here and are shared by inference code and by the
//! forward half of the recorded graph in [`super::graph`].

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return shape_err(format!(
                "shape {shape:?} implies {expected} values, got {}",
                values.len()
            ));
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(vec![n], values)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        validate_shape(&shape)?;
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        validate_shape(&shape)?;
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return shape_err(format!(
                "gradient of length {} for tensor of length {}",
                grad.len(),
                self.values.len()
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// `(rows, cols)` of a rank-2 tensor. A rank-1 tensor of length n is a
    /// single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (r, k) = self.dims2();
        let (k2, c) = other.dims2();
        if self.shape.len() != 2 || other.shape.len() != 2 || k != k2 {
            return shape_err(format!(
                "matmul of {:?} by {:?}",
                self.shape, other.shape
            ));
        }
        let mut out = vec![0.0; r * c];
        matmul_into(&self.values, &other.values, &mut out, r, k, c);
        Tensor::matrix(r, c, out)
    }

    /// Adds a length-`cols` row to every row.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2();
        if row.len() != c {
            return shape_err(format!(
                "row broadcast of {:?} onto {:?}",
                row.shape, self.shape
            ));
        }
        let mut out = self.values.clone();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(&row.values) {
                *o += b;
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.values.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.map(f64::ln))
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return shape_err(format!(
                "element-wise op on {:?} and {:?}",
                self.shape, other.shape
            ));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape.clone(), values)
    }

    /// Subtracts each row's maximum from that row.
    pub fn sub_row_max(&self) -> Tensor {
        let (r, c) = self.dims2();
        let mut out = self.values.clone();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v -= m);
        }
        Tensor {
            shape: self.shape.clone(),
            values: out,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Row-wise softmax of `self / temperature`.
    pub fn softmax_rows(&self, temperature: f64) -> Tensor {
        let (r, c) = self.dims2();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(crate::losses::softmax_unchecked(self.row(i), temperature));
        }
        Tensor::new(vec![r, c], out).expect("softmax keeps shape")
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 2 {
        return shape_err(format!("only rank 1 and 2 are supported, got {shape:?}"));
    }
    if shape.contains(&0) {
        return shape_err(format!("zero-sized dimension in {shape:?}"));
    }
    Ok(())
}

/// `out[r×c] = a[r×k] · b[k×c]`, i-k-j loop order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * c..(p + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}
