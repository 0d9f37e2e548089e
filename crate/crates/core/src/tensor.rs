//! Dense row-major `f64` tensors.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::parallel::{self, ExecPolicy};

/// Output rows handled per GEMM call. Fixed so that results do not depend on
/// the execution policy.
const GEMM_ROW_BLOCK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
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
            shape: vec![],
            data: vec![value],
        }
    }

    /// Builds a `[rows, cols]` matrix. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Leading extent (1 for scalars).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all extents after the first.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols().max(1))
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn require_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return shape_err(format!(
                "{what}: expected a matrix, got shape {:?}",
                self.shape
            ));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn require_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.require_same_shape(other, "zip_map")?;
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

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &Tensor) -> Result<()> {
        self.require_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Selects rows by index (duplicates allowed).
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape = vec![idx.len()];
        } else {
            shape[0] = idx.len();
        }
        Tensor { shape, data }
    }

    /// Stacks matrices with equal trailing shape along the first axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return shape_err("concat_rows: trailing shapes differ");
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Tensor::new(shape, data)
    }

    /// `self · otherᵀ` for `[n, k] x [m, k] -> [n, m]`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.require_matrix("matmul_nt lhs")?;
        let (m, k2) = other.require_matrix("matmul_nt rhs")?;
        if k != k2 {
            return shape_err(format!("matmul_nt inner dims {k} vs {k2}"));
        }
        // B = otherᵀ viewed with strides (1, k)
        Ok(gemm(n, k, m, &self.data, (k, 1), &other.data, (1, k)))
    }

    /// `self · other` for `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.require_matrix("matmul lhs")?;
        let (k2, m) = other.require_matrix("matmul rhs")?;
        if k != k2 {
            return shape_err(format!("matmul inner dims {k} vs {k2}"));
        }
        Ok(gemm(n, k, m, &self.data, (k, 1), &other.data, (m, 1)))
    }

    /// `selfᵀ · other` for `[k, n] x [k, m] -> [n, m]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, n) = self.require_matrix("matmul_tn lhs")?;
        let (k2, m) = other.require_matrix("matmul_tn rhs")?;
        if k != k2 {
            return shape_err(format!("matmul_tn inner dims {k} vs {k2}"));
        }
        Ok(gemm(n, k, m, &self.data, (1, n), &other.data, (m, 1)))
    }
}

/// `C[n, m] = A[n, k] · B[k, m]` with arbitrary (row, col) strides on A and B.
fn gemm(
    n: usize,
    k: usize,
    m: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
) -> Tensor {
    let mut out = vec![0.0; n * m];
    if n > 0 && m > 0 && k > 0 {
        parallel::for_each_chunk_mut(
            ExecPolicy::default(),
            &mut out,
            GEMM_ROW_BLOCK * m,
            |block, c| {
                let row0 = block * GEMM_ROW_BLOCK;
                let rows = c.len() / m;
                // SAFETY: strides describe in-bounds views of `a` and `b`; the
                // rows `row0..row0 + rows` of A exist and `c` holds rows x m.
                unsafe {
                    matrixmultiply::dgemm(
                        rows,
                        k,
                        m,
                        1.0,
                        a.as_ptr().add(row0 * rsa),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        0.0,
                        c.as_mut_ptr(),
                        m as isize,
                        1,
                    );
                }
            },
        );
    }
    Tensor {
        shape: vec![n, m],
        data: out,
    }
}

/// Projects every row onto the unit sphere.
///
/// Rows with norm below `eps` are reported as [`Error::DegenerateVector`].
pub fn l2_normalize(v: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, d) = v.require_matrix("l2_normalize")?;
    let mut out = v.clone();
    for (i, row) in out.data.chunks_mut(d.max(1)).enumerate() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < eps {
            return Err(Error::DegenerateVector { row: i, norm });
        }
        row.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(out)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (n, k) = (a.shape()[0], a.shape()[1]);
        let m = b.shape()[1];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.data()[i * k + t] * b.data()[t * m + j];
                }
                out[i * m + j] = s;
            }
        }
        Tensor::new(vec![n, m], out).unwrap()
    }

    fn seq(shape: &[usize], start: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| ((i as f64 + start) * 0.37).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let a = seq(&[70, 9], 0.0);
        let b = seq(&[9, 5], 3.0);
        let want = naive_matmul(&a, &b);
        let got = a.matmul(&b).unwrap();
        let nt = a.matmul_nt(&b.transpose().unwrap()).unwrap();
        let tn = a.transpose().unwrap().matmul_tn(&b).unwrap();
        for t in [&got, &nt, &tn] {
            for (x, y) in t.data().iter().zip(want.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = seq(&[2, 3], 0.0);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn normalize_examples() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let n = l2_normalize(&t, 1e-12).unwrap();
        assert_eq!(n.row(0), &[1.0, 0.0]);
        assert!((n.row(1)[0] - 0.6).abs() < 1e-15 && (n.row(1)[1] - 0.8).abs() < 1e-15);
        let z = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            l2_normalize(&z, 1e-12),
            Err(Error::DegenerateVector { row: 0, .. })
        ));
    }

    #[test]
    fn select_and_concat() {
        let a = seq(&[3, 2], 0.0);
        let s = a.select_rows(&[2, 0, 2]);
        assert_eq!(s.row(0), a.row(2));
        assert_eq!(s.row(1), a.row(0));
        let c = Tensor::concat_rows(&[&a, &s]).unwrap();
        assert_eq!(c.shape(), &[6, 2]);
        assert_eq!(c.row(5), a.row(2));
    }
}
