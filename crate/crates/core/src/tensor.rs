//! Dense row-major matrices in 64-bit float.

use std::fmt;

use crate::rng::Rng;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("operation undefined on an empty matrix")]
    Empty,
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and small fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows).map(move |r| self.data[r * self.cols + c])
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(TensorError::Shape {
                op: "add",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// Adds a 1×cols row vector to every row.
    pub fn add_row_broadcast(&self, bias: &Matrix) -> Result<Matrix> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(TensorError::Shape {
                op: "add_row_broadcast",
                lhs: self.shape(),
                rhs: bias.shape(),
            });
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols.max(1)) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Copies columns `[start, start + width)` into a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Matrix> {
        if start + width > self.cols {
            return Err(TensorError::Shape {
                op: "column_block",
                lhs: self.shape(),
                rhs: (start, width),
            });
        }
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.data[r * width..(r + 1) * width]
                .copy_from_slice(&self.data[r * self.cols + start..r * self.cols + start + width]);
        }
        Ok(out)
    }

    /// Copies rows `[start, start + height)` into a new matrix.
    pub fn row_block(&self, start: usize, height: usize) -> Result<Matrix> {
        if start + height > self.rows {
            return Err(TensorError::Shape {
                op: "row_block",
                lhs: self.shape(),
                rhs: (start, height),
            });
        }
        Ok(Matrix {
            rows: height,
            cols: self.cols,
            data: self.data[start * self.cols..(start + height) * self.cols].to_vec(),
        })
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hcat(blocks: &[&Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if let Some(bad) = blocks.iter().find(|b| b.rows != rows) {
            return Err(TensorError::Shape {
                op: "hcat",
                lhs: (rows, 0),
                rhs: bad.shape(),
            });
        }
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn scale_column(&mut self, c: usize, s: f64) {
        for r in 0..self.rows {
            self.data[r * self.cols + c] *= s;
        }
    }

    pub fn scale_row(&mut self, r: usize, s: f64) {
        for v in &mut self.data[r * self.cols..(r + 1) * self.cols] {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(TensorError::Shape {
                op: "max_abs_diff",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `max|a - b| / max|a|`, the deviation measure used for equivalence.
    pub fn max_rel_diff(&self, other: &Matrix) -> Result<f64> {
        let dev = self.max_abs_diff(other)?;
        Ok(relative(dev, self.max_abs()))
    }
}

pub(crate) fn relative(dev: f64, scale: f64) -> f64 {
    if dev == 0.0 {
        0.0
    } else if scale > 0.0 {
        dev / scale
    } else {
        f64::INFINITY
    }
}

/// Sum of absolute values of all entries.
pub fn l1_norm(m: &Matrix) -> Result<f64> {
    if m.is_empty() {
        return Err(TensorError::Empty);
    }
    Ok(m.data.iter().map(|v| v.abs()).sum())
}

/// Frobenius norm.
pub fn l2_norm(m: &Matrix) -> Result<f64> {
    if m.is_empty() {
        return Err(TensorError::Empty);
    }
    Ok(m.data.iter().map(|v| v * v).sum::<f64>().sqrt())
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(TensorError::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let out_row = &mut out.data[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in out_row.iter_mut().zip(&b.data[p * m..(p + 1) * m]) {
                *o += aip * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(TensorError::Shape {
            op: "matmul_transposed",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Ok(out)
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn row_softmax(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    if m.cols == 0 {
        return out;
    }
    for row in out.data.chunks_mut(m.cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Matrix with i.i.d. `N(0, sigma²)` entries, filled in row-major order.
pub fn gaussian_fill(rows: usize, cols: usize, sigma: f64, rng: &mut Rng) -> Result<Matrix> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(TensorError::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let data = (0..rows * cols).map(|_| rng.normal(sigma)).collect();
    Ok(Matrix { rows, cols, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_norm(&Matrix::zeros(2, 2)).unwrap(), 0.0);
        let m = Matrix::from_rows(&[&[1.0, -2.0], &[3.0, -4.0]]);
        assert_eq!(l1_norm(&m).unwrap(), 10.0);
        assert_eq!(l1_norm(&Matrix::zeros(0, 3)), Err(TensorError::Empty));
    }

    #[test]
    fn l1_gaussian_64_within_four_sigma() {
        let mut rng = Rng::new(7);
        let m = gaussian_fill(64, 64, 1.0, &mut rng).unwrap();
        let n = 4096.0;
        let mean = n * (2.0 / std::f64::consts::PI).sqrt();
        let sd = (n * (1.0 - 2.0 / std::f64::consts::PI)).sqrt();
        let v = l1_norm(&m).unwrap();
        assert!((v - mean).abs() < 4.0 * sd, "{v} vs {mean} ± {}", 4.0 * sd);
    }

    #[test]
    fn l2_examples() {
        assert!((l2_norm(&Matrix::identity(3)).unwrap() - 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(l2_norm(&Matrix::zeros(2, 5)).unwrap(), 0.0);
        assert_eq!(l2_norm(&Matrix::row_vector(&[3.0, 4.0])).unwrap(), 5.0);
        assert_eq!(l2_norm(&Matrix::zeros(3, 0)), Err(TensorError::Empty));
    }

    #[test]
    fn matmul_examples() {
        let mut rng = Rng::new(1);
        let m = gaussian_fill(3, 5, 1.0, &mut rng).unwrap();
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);

        let a = Matrix::row_vector(&[1.0, 2.0]);
        let b = Matrix::from_rows(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), Matrix::from_rows(&[&[11.0]]));

        let a = gaussian_fill(8, 4, 1.0, &mut rng).unwrap();
        let b = gaussian_fill(4, 8, 1.0, &mut rng).unwrap();
        let diff = matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)).unwrap();
        assert!(diff < 1e-12);

        assert!(matches!(matmul(&a, &a), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn matmul_transposed_agrees() {
        let mut rng = Rng::new(2);
        let a = gaussian_fill(5, 7, 1.0, &mut rng).unwrap();
        let b = gaussian_fill(6, 7, 1.0, &mut rng).unwrap();
        let lhs = matmul_transposed(&a, &b).unwrap();
        let rhs = matmul(&a, &b.transpose()).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let single = row_softmax(&Matrix::from_rows(&[&[3.0], &[-7.0], &[1e300]]));
        assert!(single.data().iter().all(|&v| v == 1.0));

        let half = row_softmax(&Matrix::row_vector(&[0.0, 0.0]));
        assert_eq!(half.data(), &[0.5, 0.5]);

        let big = row_softmax(&Matrix::row_vector(&[1000.0, 0.0]));
        assert!(big.is_finite());
        // Stabilized oracle: exp(-1000) underflows to 0 relative to 1.
        assert!((big.get(0, 0) - 1.0).abs() < 1e-15);
        assert!(big.get(0, 1) < 1e-300);
    }

    #[test]
    fn gaussian_fill_properties() {
        let a = gaussian_fill(4, 4, 1.0, &mut Rng::new(9)).unwrap();
        let b = gaussian_fill(4, 4, 1.0, &mut Rng::new(9)).unwrap();
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));

        let big = gaussian_fill(256, 256, 1.0, &mut Rng::new(11)).unwrap();
        let n = big.data().len() as f64;
        let mean = big.data().iter().sum::<f64>() / n;
        let var = big.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((0.97..=1.03).contains(&var), "{var}");

        // |x| > 0.01 at sigma = 0.001 is a 10-sigma event.
        let tiny = gaussian_fill(2, 2, 0.001, &mut Rng::new(12)).unwrap();
        assert!(tiny.data().iter().all(|v| v.abs() < 0.01));

        assert!(gaussian_fill(2, 2, 0.0, &mut Rng::new(0)).is_err());
        assert!(gaussian_fill(2, 2, -1.0, &mut Rng::new(0)).is_err());
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-10.0f64..10.0, rows * cols)
            .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn l1_homogeneous(m in small_matrix(3, 4), c in -100.0f64..100.0) {
            let lhs = l1_norm(&m.scale(c)).unwrap();
            let rhs = c.abs() * l1_norm(&m).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
        }

        #[test]
        fn matmul_associative(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.max_abs().max(1.0);
            prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-10 * scale);
        }

        #[test]
        fn softmax_shift_invariant(m in small_matrix(3, 5), shift in prop::collection::vec(-50.0f64..50.0, 3)) {
            let mut shifted = m.clone();
            for r in 0..3 {
                for c in 0..5 {
                    shifted.set(r, c, m.get(r, c) + shift[r]);
                }
            }
            let a = row_softmax(&m);
            let b = row_softmax(&shifted);
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
            for r in 0..3 {
                let s: f64 = a.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(a.row(r).iter().all(|&v| v > 0.0 && v <= 1.0));
            }
        }
    }
}
