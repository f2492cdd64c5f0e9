use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Dense row-major array of `f64`.
///
/// A one-element array of any shape is treated as a scalar by the tape's
/// broadcasting rules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return contract(format!(
                "shape {shape:?} holds {n} elements but {} were supplied",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an `rows × cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// `(rows, cols)` of a 2-D array.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => contract(format!("expected a 2-D array, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return contract(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn matmul(&self, rhs: &Array) -> Result<Array> {
        let (n, k) = self.dims2()?;
        let (k2, m) = rhs.dims2()?;
        if k != k2 {
            return contract(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, rhs.shape
            ));
        }
        let mut out = vec![0.0; n * m];
        if m >= 4 {
            for i in 0..n {
                let row = &mut out[i * m..(i + 1) * m];
                for p in 0..k {
                    axpy(row, self.data[i * k + p], &rhs.data[p * m..(p + 1) * m]);
                }
            }
        } else {
            for i in 0..n {
                let a = &self.data[i * k..(i + 1) * k];
                for j in 0..m {
                    out[i * m + j] = a.iter().enumerate().map(|(p, &av)| av * rhs.data[p * m + j]).sum();
                }
            }
        }
        Ok(Array {
            shape: vec![n, m],
            data: out,
        })
    }

    /// `self · rhsᵀ` for `[n, k]` and `[m, k]` operands.
    pub fn matmul_nt(&self, rhs: &Array) -> Result<Array> {
        let (n, k) = self.dims2()?;
        let (m, k2) = rhs.dims2()?;
        if k != k2 {
            return contract(format!("matmul_nt extents differ: {:?} x {:?}ᵀ", self.shape, rhs.shape));
        }
        let mut out = vec![0.0; n * m];
        if k >= 8 {
            for i in 0..n {
                let a = &self.data[i * k..(i + 1) * k];
                for j in 0..m {
                    out[i * m + j] = dot(a, &rhs.data[j * k..(j + 1) * k]);
                }
            }
        } else {
            for i in 0..n {
                let row = &mut out[i * m..(i + 1) * m];
                for p in 0..k {
                    let a = self.data[i * k + p];
                    for (j, o) in row.iter_mut().enumerate() {
                        *o += a * rhs.data[j * k + p];
                    }
                }
            }
        }
        Ok(Array {
            shape: vec![n, m],
            data: out,
        })
    }

    /// `selfᵀ · rhs` for `[n, k]` and `[n, m]` operands.
    pub fn matmul_tn(&self, rhs: &Array) -> Result<Array> {
        let (n, k) = self.dims2()?;
        let (n2, m) = rhs.dims2()?;
        if n != n2 {
            return contract(format!("matmul_tn extents differ: {:?}ᵀ x {:?}", self.shape, rhs.shape));
        }
        let mut out = vec![0.0; k * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            let b = &rhs.data[i * m..(i + 1) * m];
            if m >= 4 {
                for (p, &av) in a.iter().enumerate() {
                    axpy(&mut out[p * m..(p + 1) * m], av, b);
                }
            } else {
                for (j, &bv) in b.iter().enumerate() {
                    for (p, &av) in a.iter().enumerate() {
                        out[p * m + j] += av * bv;
                    }
                }
            }
        }
        Ok(Array {
            shape: vec![k, m],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Array> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Array {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Dot product with four partial sums, which lets the loop vectorize.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
