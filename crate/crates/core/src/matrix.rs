//! Dense row-major `f64` matrix used by the tape and the networks.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self::from_vec(1, cols, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Value of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar matrix");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self · other`. Each output entry accumulates over the shared index in
    /// ascending order starting from 0.0, so a row of a batched product is
    /// bit-identical to the product of that row alone.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::from_vec(n, m, out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self::from_vec(self.cols, self.rows, out)
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(&self, row: &Self) -> Self {
        assert_eq!(row.shape(), (1, self.cols), "row broadcast shape mismatch");
        let mut out = self.clone();
        for r in out.data.chunks_mut(self.cols.max(1)) {
            for (o, &b) in r.iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Column sums, shape `1 x cols`.
    pub fn sum_rows(&self) -> Self {
        let mut out = vec![0.0; self.cols];
        for r in self.data.chunks(self.cols.max(1)) {
            for (o, &v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        Self::from_vec(1, self.cols, out)
    }

    /// Row sums, shape `rows x 1`.
    pub fn sum_cols(&self) -> Self {
        let data = (0..self.rows).map(|i| self.row(i).iter().sum()).collect();
        Self::from_vec(self.rows, 1, data)
    }

    /// Row maxima, shape `rows x 1`.
    pub fn max_cols(&self) -> Self {
        let data = (0..self.rows)
            .map(|i| self.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Self::from_vec(self.rows, 1, data)
    }

    /// Repeats a `1 x 1` value to `rows x cols`.
    pub fn broadcast(&self, rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, self.item())
    }

    /// Repeats a `1 x c` row `rows` times.
    pub fn broadcast_rows(&self, rows: usize) -> Self {
        assert_eq!(self.rows, 1);
        let mut data = Vec::with_capacity(rows * self.cols);
        for _ in 0..rows {
            data.extend_from_slice(&self.data);
        }
        Self::from_vec(rows, self.cols, data)
    }

    /// Repeats an `r x 1` column `cols` times.
    pub fn broadcast_cols(&self, cols: usize) -> Self {
        assert_eq!(self.cols, 1);
        let mut data = Vec::with_capacity(self.rows * cols);
        for &v in &self.data {
            data.extend(std::iter::repeat_n(v, cols));
        }
        Self::from_vec(self.rows, cols, data)
    }

    /// Selects rows by index.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec(idx.len(), self.cols, data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.zip_map(other, |a, b| (a - b).abs())
            .data
            .into_iter()
            .fold(0.0, f64::max)
    }

    /// Euclidean inner product of the flattened matrices.
    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}
