//! Dense 2-D tensor arithmetic: the universal numeric carrier for
//! features, parameters and attention maps, plus the binary container
//! used by checkpoints and feature files.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{CfrError, Result};

/// Dense row-major 2-D array of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CfrError::shape(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(CfrError::argument("matrix needs at least one row"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(CfrError::shape(format!(
                    "row {} has length {}, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    /// Single-row matrix wrapping a vector.
    pub fn row_vector(v: Vec<f64>) -> Self {
        Matrix { rows: 1, cols: v.len(), data: v }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
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

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, |a, b| a * b)
    }

    fn zip(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(CfrError::shape(format!(
                "elementwise op on {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(CfrError::shape(format!(
                "add_assign on {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    /// Sum of each column, as a vector of length `cols`.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                s[c] += self.data[r * self.cols + c];
            }
        }
        s
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(CfrError::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for t in 0..a.cols {
            let av = a.data[i * a.cols + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[t * b.cols..(t + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(out)
}

/// `outer(u, v)[i][j] = u[i] * v[j]`.
pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(u.len(), v.len());
    for i in 0..u.len() {
        for j in 0..v.len() {
            out.data[i * v.len() + j] = u[i] * v[j];
        }
    }
    out
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v.iter()).map(|(a, b)| a * b).sum()
}

/// Numerically stable softmax over a vector (max-subtraction).
pub fn softmax_vec(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(CfrError::argument("softmax of empty vector"));
    }
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Softmax over ALL entries of a matrix; the result sums to one globally.
pub fn softmax_flat(x: &Matrix) -> Result<Matrix> {
    if x.is_empty() {
        return Err(CfrError::argument("softmax of empty matrix"));
    }
    let data = softmax_vec(&x.data)?;
    Ok(Matrix { rows: x.rows, cols: x.cols, data })
}

/// Independent softmax over each row.
pub fn softmax_rows(x: &Matrix) -> Result<Matrix> {
    if x.is_empty() {
        return Err(CfrError::argument("softmax of empty matrix"));
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let s = softmax_vec(x.row(r))?;
        out.row_mut(r).copy_from_slice(&s);
    }
    Ok(out)
}

/// Backward of `y = softmax_vec(x)`: given dL/dy, returns dL/dx.
pub fn softmax_vec_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let inner = dot(y, dy);
    y.iter().zip(dy.iter()).map(|(&yi, &di)| yi * (di - inner)).collect()
}

/// Backward of `softmax_flat`.
pub fn softmax_flat_backward(y: &Matrix, dy: &Matrix) -> Matrix {
    let data = softmax_vec_backward(&y.data, &dy.data);
    Matrix { rows: y.rows, cols: y.cols, data }
}

/// Backward of `softmax_rows`.
pub fn softmax_rows_backward(y: &Matrix, dy: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(y.rows, y.cols);
    for r in 0..y.rows {
        let d = softmax_vec_backward(y.row(r), dy.row(r));
        out.row_mut(r).copy_from_slice(&d);
    }
    out
}

/// `y = x·weight (+ bias per row)`.
pub fn linear(x: &Matrix, weight: &Matrix, bias: Option<&[f64]>) -> Result<Matrix> {
    let mut y = matmul(x, weight)?;
    if let Some(b) = bias {
        if b.len() != weight.cols {
            return Err(CfrError::shape(format!(
                "bias length {} vs output dim {}",
                b.len(),
                weight.cols
            )));
        }
        for r in 0..y.rows {
            for (v, bv) in y.row_mut(r).iter_mut().zip(b.iter()) {
                *v += bv;
            }
        }
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// Binary container: magic "CFRT", u8 version=1, u8 dtype (0=f32, 1=f64),
// u32 rows, u32 cols (LE), row-major payload.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"CFRT";
const VERSION: u8 = 1;

impl Matrix {
    pub fn write_binary(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION, 1])?; // dtype 1 = f64
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(r: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 14];
        r.read_exact(&mut head)
            .map_err(|_| CfrError::format("truncated matrix container"))?;
        if &head[0..4] != MAGIC {
            return Err(CfrError::format("bad matrix magic"));
        }
        if head[4] != VERSION {
            return Err(CfrError::format(format!("unsupported matrix version {}", head[4])));
        }
        let dtype = head[5];
        let rows = u32::from_le_bytes(head[6..10].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(head[10..14].try_into().unwrap()) as usize;
        let n = rows * cols;
        let data = match dtype {
            0 => {
                let mut buf = vec![0u8; n * 4];
                r.read_exact(&mut buf)
                    .map_err(|_| CfrError::format("truncated f32 payload"))?;
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            }
            1 => {
                let mut buf = vec![0u8; n * 8];
                r.read_exact(&mut buf)
                    .map_err(|_| CfrError::format("truncated f64 payload"))?;
                buf.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
            d => return Err(CfrError::format(format!("unknown dtype {d}"))),
        };
        Ok(Matrix { rows, cols, data })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn matmul_identity() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let y = matmul(&Matrix::identity(2), &x).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn matmul_known_product() {
        // frozen from a scalar triple-loop evaluation
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c, Matrix::from_rows(&[vec![19.0, 22.0], vec![43.0, 50.0]]).unwrap());
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Matrix::zeros(2, 3);
        let b = Matrix::from_vec(3, 4, (0..12).map(|i| i as f64).collect()).unwrap();
        assert_eq!(matmul(&z, &b).unwrap(), Matrix::zeros(2, 4));
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("4x2"), "{err}");
    }

    #[test]
    fn softmax_uniform() {
        let y = softmax_vec(&[7.5, 7.5, 7.5]).unwrap();
        for v in y {
            assert_close(v, 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form() {
        // e^0 / (e^0 + e^{ln 3}) = 1/4
        let y = softmax_vec(&[0.0, 3.0_f64.ln()]).unwrap();
        assert_close(y[0], 0.25, 1e-15);
        assert_close(y[1], 0.75, 1e-15);
    }

    #[test]
    fn softmax_empty_rejected() {
        assert!(softmax_vec(&[]).is_err());
        assert!(softmax_flat(&Matrix::zeros(0, 0)).is_err());
    }

    #[test]
    fn softmax_flat_matches_vec_on_flattened() {
        let x = Matrix::from_vec(3, 4, (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        let flat = softmax_flat(&x).unwrap();
        let by_vec = softmax_vec(x.data()).unwrap();
        for (a, b) in flat.data().iter().zip(by_vec.iter()) {
            assert_close(*a, *b, 1e-15);
        }
        let total: f64 = flat.data().iter().sum();
        assert_close(total, 1.0, 1e-12);
    }

    #[test]
    fn softmax_flat_scalar_oracle() {
        let x = Matrix::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.37).cos()).collect()).unwrap();
        let y = softmax_flat(&x).unwrap();
        // independent scalar loop
        let mut mx = f64::NEG_INFINITY;
        for &v in x.data() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = 0.0;
        for &v in x.data() {
            sum += (v - mx).exp();
        }
        for (i, &v) in x.data().iter().enumerate() {
            assert_close(y.data()[i], (v - mx).exp() / sum, 1e-12);
        }
    }

    #[test]
    fn linear_identity_and_bias() {
        let x = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let y = linear(&x, &Matrix::identity(2), None).unwrap();
        assert_eq!(x, y);

        let z = Matrix::zeros(3, 2);
        let w = Matrix::zeros(2, 2);
        let b = vec![1.5, -0.5];
        let y = linear(&z, &w, Some(&b)).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), &b[..]);
        }
    }

    #[test]
    fn linear_matches_matmul_plus_row_add() {
        let x = Matrix::from_rows(&[vec![0.3, -1.2, 0.8], vec![2.0, 0.1, -0.4]]).unwrap();
        let w = Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.3, 0.2], vec![0.7, -1.1]]).unwrap();
        let b = vec![0.25, -0.75];
        let y = linear(&x, &w, Some(&b)).unwrap();
        let base = matmul(&x, &w).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert_close(y.get(r, c), base.get(r, c) + b[c], 1e-15);
            }
        }
    }

    #[test]
    fn container_roundtrip() {
        let m = Matrix::from_vec(3, 2, vec![1.0, -2.5, 3.25, 0.0, 1e-9, 7.0]).unwrap();
        let mut buf = Vec::new();
        m.write_binary(&mut buf).unwrap();
        let back = Matrix::read_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn container_rejects_bad_magic_and_truncation() {
        let m = Matrix::zeros(2, 2);
        let mut buf = Vec::new();
        m.write_binary(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Matrix::read_binary(&mut bad.as_slice()).is_err());
        let short = &buf[..buf.len() - 3];
        assert!(Matrix::read_binary(&mut &short[..]).is_err());
    }
}
