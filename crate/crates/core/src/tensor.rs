//! Dense row-major tensors of `f64`.
//!
//! Image batches use the `[batch, height, width, channels]` order. There is
//! no implicit broadcasting; the only broadcast is [`Tensor::add_row_broadcast`].

use std::fmt;

use crate::error::{Error, Result};
use crate::linalg::{self, Layout};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Reduction kinds for [`Tensor::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    /// Index of the largest value; ties go to the lowest index.
    Argmax,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be >= 1, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("Tensor::new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "tensor dimensions must be >= 1, got {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Row-major matrix from nested rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Tensor::new(&[rows.len(), cols], data).expect("valid matrix")
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(&[n], data).expect("non-empty vector")
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidArgument(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Leading dimension, the batch size for batched tensors.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        self.clone().into_reshaped(new_shape)
    }

    pub fn into_reshaped(mut self, new_shape: &[usize]) -> Result<Tensor> {
        let count: usize = new_shape.iter().product();
        if new_shape.is_empty() || new_shape.contains(&0) || count != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, new_shape));
        }
        self.shape = new_shape.to_vec();
        Ok(self)
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix_dims()?;
        let (k2, n) = rhs.matrix_dims()?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![0.0; m * n];
        linalg::gemm(
            m,
            k,
            n,
            &self.data,
            Layout::row_major(k),
            &rhs.data,
            Layout::row_major(n),
            0.0,
            &mut out,
        );
        Tensor::new(&[m, n], out)
    }

    /// Adds `v` to every row of a matrix.
    pub fn add_row_broadcast(&self, v: &Tensor) -> Result<Tensor> {
        let (_, n) = self.matrix_dims()?;
        if v.rank() != 1 || v.len() != n {
            return Err(Error::shape("add_row_broadcast", &self.shape, &v.shape));
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(n) {
            for (x, b) in row.iter_mut().zip(&v.data) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// Reduces along `axis`, removing it from the shape. A rank-1 input
    /// reduces to shape `[1]`.
    pub fn reduce(&self, axis: usize, kind: Reduction) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::InvalidArgument(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| self.data[(o * len + j) * inner + i];
                out[o * inner + i] = match kind {
                    Reduction::Sum => (0..len).map(at).sum(),
                    Reduction::Mean => (0..len).map(at).sum::<f64>() / len as f64,
                    Reduction::Argmax => {
                        let mut best = 0;
                        for j in 1..len {
                            if at(j) > at(best) {
                                best = j;
                            }
                        }
                        best as f64
                    }
                };
            }
        }
        let mut shape: Vec<usize> = self.shape[..axis]
            .iter()
            .chain(&self.shape[axis + 1..])
            .copied()
            .collect();
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::new(&shape, out)
    }

    /// Per-row argmax of a batch, flattening trailing dimensions.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let cols = self.len() / self.batch();
        self.data
            .chunks_exact(cols)
            .map(argmax)
            .collect()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies rows `indices` of the leading axis into a new batch.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let row = self.len() / self.batch();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    /// Contiguous slice `[start, end)` of the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let row = self.len() / self.batch();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * row..end * row].to_vec(),
        }
    }
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        let head = &self.data[..self.data.len().min(SHOWN)];
        write!(f, " {head:?}")?;
        if self.data.len() > SHOWN {
            write!(f, " ..")?;
        }
        Ok(())
    }
}
