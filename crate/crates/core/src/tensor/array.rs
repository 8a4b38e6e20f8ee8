//! Dense row-major `f64` arrays and the broadcasting rules shared by the graph.

use crate::error::{Error, Result};

/// An owned n-dimensional array of 64-bit floats in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
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

    /// A single-element array of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Stack equal-length rows into an `[n, d]` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n * d);
        for row in rows {
            let row = row.as_ref();
            if row.len() != d {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![d],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![n, d],
            data,
        })
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

    /// Number of rows of a matrix (first dimension).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of columns of a matrix (product of trailing dimensions).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        let c = self.cols().max(1);
        self.data.chunks(c)
    }

    /// Select rows by index into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Array {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Array { shape, data }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Array> {
        Array::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&self, other: &Array) -> Result<Array> {
        let shape_err = || Error::Shape {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        let (m, k) = self.require_matrix("matmul").map_err(|_| shape_err())?;
        let (k2, n) = other.require_matrix("matmul").map_err(|_| shape_err())?;
        if k != k2 {
            return Err(shape_err());
        }
        let mut out = vec![0.0; m * n];
        // i-k-j order keeps the inner loop contiguous in both `other` and `out`.
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Array {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Array> {
        let (r, c) = self.require_matrix("transpose")?;
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
}

/// Whether `from` can be broadcast to `to`: dimensions are aligned from the
/// right and every aligned dimension of `from` is either equal or 1.
pub fn broadcastable(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        // Leading singleton dimensions are harmless.
        let extra = from.len() - to.len();
        if from[..extra].iter().any(|&d| d != 1) {
            return false;
        }
        return broadcastable(&from[extra..], to);
    }
    from.iter()
        .rev()
        .zip(to.iter().rev())
        .all(|(&f, &t)| f == t || f == 1)
}

/// For each flat index of `to`, the flat index of `from` it reads.
pub(crate) fn broadcast_map(from: &[usize], to: &[usize]) -> Vec<usize> {
    let from_n: usize = from.iter().product();
    let to_n: usize = to.iter().product();
    if from_n == 1 {
        return vec![0; to_n];
    }
    let rank = to.len();
    let mut from_dims = vec![1usize; rank];
    for (i, &d) in from.iter().rev().take(rank).enumerate() {
        from_dims[rank - 1 - i] = d;
    }
    let mut from_strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        from_strides[i] = if from_dims[i] == 1 { 0 } else { s };
        s *= from_dims[i];
    }
    let mut map = Vec::with_capacity(to_n);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..to_n {
        map.push(cur);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            cur += from_strides[ax];
            if idx[ax] < to[ax] {
                break;
            }
            cur -= from_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Result shape of a binary elementwise op, or a shape error.
pub(crate) fn binary_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b || (broadcastable(b, a) && na >= nb) {
        Ok(a.to_vec())
    } else if broadcastable(a, b) {
        Ok(b.to_vec())
    } else {
        Err(Error::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// Apply `f` elementwise after broadcasting both operands to `out_shape`.
pub(crate) fn zip_broadcast(
    a: &Array,
    b: &Array,
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Array {
    let data = if a.shape == out_shape && b.shape == out_shape {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    } else if a.shape == out_shape && b.len() == 1 {
        let y = b.data[0];
        a.data.iter().map(|&x| f(x, y)).collect()
    } else {
        let ma = (a.shape != out_shape).then(|| broadcast_map(&a.shape, out_shape));
        let mb = (b.shape != out_shape).then(|| broadcast_map(&b.shape, out_shape));
        let n: usize = out_shape.iter().product();
        (0..n)
            .map(|i| {
                let x = a.data[ma.as_ref().map_or(i, |m| m[i])];
                let y = b.data[mb.as_ref().map_or(i, |m| m[i])];
                f(x, y)
            })
            .collect()
    };
    Array {
        shape: out_shape.to_vec(),
        data,
    }
}

/// Sum `a` down to `shape` (the adjoint of broadcasting `shape` up to `a`).
pub(crate) fn sum_to(a: &Array, shape: &[usize]) -> Array {
    if a.shape == shape {
        return a.clone();
    }
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    if n == 1 {
        out[0] = a.sum();
    } else {
        let map = broadcast_map(shape, &a.shape);
        for (v, &j) in a.data.iter().zip(&map) {
            out[j] += v;
        }
    }
    Array {
        shape: shape.to_vec(),
        data: out,
    }
}

pub(crate) fn broadcast_to(a: &Array, shape: &[usize]) -> Array {
    if a.shape == shape {
        return a.clone();
    }
    let map = broadcast_map(&a.shape, shape);
    Array {
        shape: shape.to_vec(),
        data: map.into_iter().map(|j| a.data[j]).collect(),
    }
}
