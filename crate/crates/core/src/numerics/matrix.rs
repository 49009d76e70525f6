//! Row-major dense matrices of `f64`.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default LeakyReLU negative slope.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Variance stabilizer used by layer normalization.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of length {} cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn col_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    /// Entries drawn i.i.d. from `N(0, std^2)`.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { rows, cols, data }
    }

    /// Entries drawn i.i.d. uniformly from `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Self { rows, cols, data }
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "t_matmul: {:?}ᵀ x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_t: {:?} x {:?}ᵀ",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape(other, "elementwise")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    /// Column-wise mean as a `1 x cols` matrix.
    pub fn mean_rows(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        if self.rows == 0 {
            return out;
        }
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let n = self.rows as f64;
        out.data.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Induced infinity norm (max absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Copies columns `[start, start + len)`.
    pub fn col_slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.cols {
            return Err(Error::Shape(format!(
                "column slice {start}..{} of {} columns",
                start + len,
                self.cols
            )));
        }
        let mut out = Self::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + len]);
        }
        Ok(out)
    }

    /// Horizontal concatenation.
    pub fn hcat(parts: &[&Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::Shape("hcat: row counts differ".into()));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut out = Self::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for p in parts {
                out.row_mut(r)[offset..offset + p.cols].copy_from_slice(p.row(r));
                offset += p.cols;
            }
        }
        Ok(out)
    }

    /// Vertical concatenation.
    pub fn vcat(parts: &[&Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if parts.iter().any(|p| p.cols != cols) {
            return Err(Error::Shape("vcat: column counts differ".into()));
        }
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            rows: data.len() / cols.max(1),
            cols,
            data,
        })
    }

    /// Softmax along each row. Entries whose mask value is 0 are treated as
    /// `-inf` and come out exactly 0.
    pub fn row_softmax(&self, mask: Option<&Self>) -> Result<Self> {
        if let Some(m) = mask {
            self.same_shape(m, "row_softmax mask")?;
        }
        let mut out = Self::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let keep = |c: usize| mask.is_none_or(|m| m.get(r, c) != 0.0);
            let row = self.row(r);
            let max = (0..self.cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateAttention { row: r });
            }
            let out_row = out.row_mut(r);
            let mut total = 0.0;
            for c in 0..row.len() {
                if keep(c) {
                    let e = (row[c] - max).exp();
                    out_row[c] = e;
                    total += e;
                }
            }
            out_row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(out)
    }

    /// Per-row standardization followed by an affine map with `gain` and
    /// `bias` (both `1 x cols`).
    pub fn layer_normalize(&self, gain: &Self, bias: &Self) -> Result<Self> {
        if gain.shape() != (1, self.cols) || bias.shape() != (1, self.cols) {
            return Err(Error::Shape(format!(
                "layer_normalize: gain {:?} / bias {:?} for {} columns",
                gain.shape(),
                bias.shape(),
                self.cols
            )));
        }
        let n = self.cols as f64;
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gain.data[c] + bias.data[c];
            }
        }
        Ok(out)
    }

    pub fn leaky_relu(&self, slope: f64) -> Self {
        self.map(|v| if v >= 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn tanh(&self) -> Self {
        self.map(f64::tanh)
    }

    /// Rows rescaled to unit Euclidean norm; zero rows stay zero.
    pub fn normalize_rows(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        out
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_symmetric_row() {
        let m = DenseMatrix::row_vector(&[0.0, 0.0]);
        let s = m.row_softmax(None).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_single_unmasked_entry() {
        let m = DenseMatrix::row_vector(&[3.7, -1.2]);
        let mask = DenseMatrix::row_vector(&[1.0, 0.0]);
        let s = m.row_softmax(Some(&mask)).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let mask = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let err = m.row_softmax(Some(&mask)).unwrap_err();
        assert!(err.to_string().contains("degenerate attention row"));
    }

    #[test]
    fn softmax_against_reference_arithmetic() {
        // e^1, e^2, e^3 over their sum, evaluated independently of the
        // max-shifted implementation.
        let (e1, e2, e3) = (1f64.exp(), 2f64.exp(), 3f64.exp());
        let z = e1 + e2 + e3;
        let expected = [e1 / z, e2 / z, e3 / z];
        let s = DenseMatrix::row_vector(&[1.0, 2.0, 3.0]).row_softmax(None).unwrap();
        for (got, want) in s.data().iter().zip(expected) {
            assert!(((got - want) / want).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_maps_to_zero() {
        let m = DenseMatrix::row_vector(&[4.0, 4.0, 4.0]);
        let out = m
            .layer_normalize(&DenseMatrix::ones(1, 3), &DenseMatrix::zeros(1, 3))
            .unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_two_points() {
        let m = DenseMatrix::row_vector(&[1.0, 3.0]);
        let out = m
            .layer_normalize(&DenseMatrix::ones(1, 2), &DenseMatrix::zeros(1, 2))
            .unwrap();
        // exact stabilized values, and within the stabilizer of +-1
        let expected = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!((out.get(0, 0) + expected).abs() < 1e-12);
        assert!((out.get(0, 1) - expected).abs() < 1e-12);
        assert!((out.get(0, 0) + 1.0).abs() < LN_EPS);
    }

    #[test]
    fn layer_norm_moments_on_random_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = DenseMatrix::random_normal(4, 8, 2.5, &mut rng);
        let out = m
            .layer_normalize(&DenseMatrix::ones(1, 8), &DenseMatrix::zeros(1, 8))
            .unwrap();
        for r in 0..4 {
            let row = out.row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            // exact value of the stabilized variance, recomputed from the input
            let src = m.row(r);
            let smean = src.iter().sum::<f64>() / 8.0;
            let svar = src.iter().map(|v| (v - smean).powi(2)).sum::<f64>() / 8.0;
            assert!((var - svar / (svar + LN_EPS)).abs() < 1e-12);
            assert!((var - 1.0).abs() < LN_EPS);
        }
    }

    #[test]
    fn activation_definitions() {
        assert!((leaky_relu(-1.0, LEAKY_SLOPE) + 0.01).abs() < 1e-15);
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(DenseMatrix::scalar(0.0).tanh().get(0, 0), 0.0);
        let m = DenseMatrix::row_vector(&[-2.0, 0.5]).leaky_relu(0.1);
        assert_eq!(m.data(), &[-0.2, 0.5]);
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DenseMatrix::random_normal(3, 4, 1.0, &mut rng);
        let b = DenseMatrix::random_normal(3, 5, 1.0, &mut rng);
        let c = DenseMatrix::random_normal(6, 4, 1.0, &mut rng);
        let lhs = a.t_matmul(&b).unwrap();
        let rhs = a.transpose().matmul(&b).unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
        let lhs = a.matmul_t(&c).unwrap();
        let rhs = a.matmul(&c.transpose()).unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let a = DenseMatrix::zeros(2, 3);
        assert!(a.matmul(&a).is_err());
        assert!(a.add(&DenseMatrix::zeros(3, 2)).is_err());
        assert!(DenseMatrix::from_vec(2, 2, vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..5, m in 1usize..5, p in 1usize..5, q in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DenseMatrix::random_normal(n, m, 1.0, &mut rng);
            let b = DenseMatrix::random_normal(m, p, 1.0, &mut rng);
            let c = DenseMatrix::random_normal(p, q, 1.0, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(left.sub(&right).unwrap().max_abs() < 1e-9);
        }

        #[test]
        fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = DenseMatrix::random_normal(rows, cols, 5.0, &mut rng);
            let mut mask = DenseMatrix::random_uniform(rows, cols, 0.0, 1.0, &mut rng).map(|v| if v < 0.5 { 0.0 } else { 1.0 });
            for r in 0..rows { mask.set(r, r % cols, 1.0); }
            let s = m.row_softmax(Some(&mask)).unwrap();
            for r in 0..rows {
                let total: f64 = s.row(r).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                for c in 0..cols {
                    let v = s.get(r, c);
                    prop_assert!((0.0..=1.0).contains(&v));
                    if mask.get(r, c) == 0.0 { prop_assert_eq!(v, 0.0); }
                }
            }
        }
    }
}
