use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with shape metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("zero-sized dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Vector of length `data.len()`.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim("expected rank 2", other, &[0, 0])),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Index of the largest entry; the first one wins on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Plain (non-recorded) matrix product, used outside the tape.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, p) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * p];
        kernels::matmul(&self.data, &other.data, &mut out, m, k, p);
        Tensor::matrix(m, p, out)
    }
}

/// Fixed-order dense kernels shared by the tape and plain tensor code.
pub(crate) mod kernels {
    /// `out[m×p] += a[m×k] · b[k×p]`
    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
        for i in 0..m {
            let row = &mut out[i * p..(i + 1) * p];
            for t in 0..k {
                let av = a[i * k + t];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[t * p..(t + 1) * p];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    /// `out[m×k] += g[m×p] · bᵀ` where `b` is `k×p`.
    pub fn matmul_a_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
        for i in 0..m {
            let grow = &g[i * p..(i + 1) * p];
            for t in 0..k {
                let brow = &b[t * p..(t + 1) * p];
                let mut acc = 0.0;
                for (x, y) in grow.iter().zip(brow) {
                    acc += x * y;
                }
                out[i * k + t] += acc;
            }
        }
    }

    /// `out[k×p] += aᵀ · g` where `a` is `m×k` and `g` is `m×p`.
    pub fn matmul_at_b(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
        for i in 0..m {
            let grow = &g[i * p..(i + 1) * p];
            for t in 0..k {
                let av = a[i * k + t];
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[t * p..(t + 1) * p];
                for (o, &gv) in orow.iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }
}
