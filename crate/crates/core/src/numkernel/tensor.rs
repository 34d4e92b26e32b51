use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use super::KernelError;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, KernelError> {
        if data.len() != rows * cols {
            return Err(KernelError::DimensionMismatch { expected: rows * cols, found: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, KernelError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(KernelError::DimensionMismatch { expected: cols, found: row.len() });
            }
            data.extend_from_slice(row);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    /// A column vector (`n × 1`).
    pub fn column(values: &[f64]) -> Self {
        Self { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · x` for `x` of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vector, KernelError> {
        if x.len() != self.cols {
            return Err(KernelError::DimensionMismatch { expected: self.cols, found: x.len() });
        }
        Ok(Vector::from((0..self.rows).map(|i| dot(self.row(i), x)).collect::<Vec<_>>()))
    }

    /// `selfᵀ · w` for `w` of length `rows`.
    pub fn matvec_transposed(&self, w: &[f64]) -> Result<Vector, KernelError> {
        if w.len() != self.rows {
            return Err(KernelError::DimensionMismatch { expected: self.rows, found: w.len() });
        }
        let mut out = vec![0.0; self.cols];
        for (i, &wi) in w.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.row(i)) {
                *o += wi * m;
            }
        }
        Ok(Vector::from(out))
    }
}

/// A dense real vector. Embeddings and attention weights are both `Vector`s.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

pub type Embedding = Vector;

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn add(&self, other: &Vector) -> Result<Vector, KernelError> {
        check_dims(self.dim(), other.dim())?;
        Ok(Vector(self.0.iter().zip(&other.0).map(|(x, y)| x + y).collect()))
    }

    pub fn scaled(&self, c: f64) -> Vector {
        Vector(self.0.iter().map(|x| c * x).collect())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Self(v.to_vec())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub(crate) fn check_dims(expected: usize, found: usize) -> Result<(), KernelError> {
    if expected == found {
        Ok(())
    } else {
        Err(KernelError::DimensionMismatch { expected, found })
    }
}
