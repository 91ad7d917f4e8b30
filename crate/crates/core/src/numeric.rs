//! Dense row-major matrices and the seeded random source.
//!
//! Everything numeric in the crate is `f64`. Randomness comes exclusively from
//! [`RngState`], a ChaCha8 stream cipher generator (`rand_chacha::ChaCha8Rng`)
//! whose output is specified independently of platform and word size. A run is
//! identified by a 64-bit seed plus a stream number; see [`RngState::substream`].

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense 2-D array of `f64` in row-major order.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix{}x{}", self.rows, self.cols)?;
        f.debug_list()
            .entries(self.data.chunks(self.cols.max(1)))
            .finish()
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

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

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row 0 has {cols} columns"),
                    format!("row {i} has {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A single column holding `values`.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Standard product `self × other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        // i-k-j order: each output row accumulates in a fixed order.
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `selfᵀ × other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "t_matmul",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let (n, k, m) = (self.cols, self.rows, other.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let a_row = &self.data[p * n..(p + 1) * n];
            let b_row = &other.data[p * m..(p + 1) * m];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * m..(i + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self × otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// Adds `bias` (length `cols`) to every row.
    pub fn add_row(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::shape(
                "add_row",
                format!("{}x{}", self.rows, self.cols),
                format!("bias of length {}", bias.len()),
            ));
        }
        for row in self.data.chunks_mut(self.cols.max(1)) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Column sums, accumulated top to bottom.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "hadamard",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Free-function form of [`Matrix::matmul`].
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Seeded ChaCha8 generator.
///
/// `RngState::substream(seed, k)` selects ChaCha stream `k` under key `seed`,
/// so independent consumers (data split, init of each model, dropout) get
/// non-overlapping sequences from one master seed. Identical seed, stream
/// and call sequence give identical output on every platform.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl PartialEq for RngState {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.stream == other.stream && self.inner == other.inner
    }
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::substream(seed, 0)
    }

    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Derives an independent child generator by drawing a fresh key.
    pub fn fork(&mut self) -> RngState {
        let child_seed = self.inner.next_u64();
        RngState::substream(child_seed, self.stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw in `[low, high)`.
    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    /// Uniform index in `0..n`; `n` must be nonzero.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// One draw from N(mean, std²). `std == 0` returns `mean` without
    /// consuming randomness.
    pub fn gaussian(&mut self, mean: f64, std: f64) -> Result<f64> {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(Error::param("std", format!("must be finite and >= 0, got {std}")));
        }
        if std == 0.0 {
            return Ok(mean);
        }
        Ok(mean + std * self.standard_normal())
    }

    /// Inverted-dropout mask: each entry is 0 with probability `p`, otherwise
    /// `1 / (1 - p)`. With `p == 0` the mask is all ones and no randomness is
    /// consumed.
    pub fn dropout_mask(&mut self, rows: usize, cols: usize, p: f64) -> Result<Matrix> {
        check_dropout(p)?;
        if p == 0.0 {
            return Ok(Matrix::ones(rows, cols));
        }
        let keep = 1.0 / (1.0 - p);
        let data = (0..rows * cols)
            .map(|_| if self.uniform() < p { 0.0 } else { keep })
            .collect();
        Ok(Matrix { rows, cols, data })
    }
}

pub(crate) fn check_dropout(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::param("dropout_p", format!("must lie in [0, 1), got {p}")));
    }
    Ok(())
}

/// Free-function form of [`RngState::dropout_mask`].
pub fn sample_dropout_mask(rng: &mut RngState, rows: usize, cols: usize, p: f64) -> Result<Matrix> {
    rng.dropout_mask(rows, cols, p)
}

/// Free-function form of [`RngState::gaussian`].
pub fn gaussian_sample(rng: &mut RngState, mean: f64, std: f64) -> Result<f64> {
    rng.gaussian(mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rand_matrix(rng: &mut RngState, r: usize, c: usize) -> Matrix {
        let data = (0..r * c).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        Matrix::new(r, c, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&a, &Matrix::identity(2)).unwrap(), a);
    }

    #[test]
    fn matmul_row_by_column() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_zeros_annihilates() {
        let mut rng = RngState::new(3);
        let a = rand_matrix(&mut rng, 4, 3);
        let z = a.matmul(&Matrix::zeros(3, 5)).unwrap();
        assert_eq!(z, Matrix::zeros(4, 5));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = RngState::new(11);
        let a = rand_matrix(&mut rng, 5, 3);
        let b = rand_matrix(&mut rng, 5, 4);
        let c = rand_matrix(&mut rng, 6, 3);
        let lhs = a.t_matmul(&b).unwrap();
        let rhs = a.transpose().matmul(&b).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        let lhs = a.matmul_t(&c).unwrap();
        let rhs = a.matmul(&c.transpose()).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn dropout_zero_is_all_ones() {
        let mut rng = RngState::new(0);
        assert_eq!(rng.dropout_mask(3, 4, 0.0).unwrap(), Matrix::ones(3, 4));
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let mut rng = RngState::new(0);
        for p in [-0.1, 1.0, 1.5, f64::NAN] {
            assert!(matches!(
                rng.dropout_mask(2, 2, p),
                Err(Error::Parameter { .. })
            ));
        }
    }

    #[test]
    fn dropout_rate_concentrates() {
        let mut rng = RngState::new(42);
        let mask = rng.dropout_mask(1000, 100, 0.05).unwrap();
        let zeros = mask.data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / 1e5;
        assert!((frac - 0.05).abs() <= 0.01, "{frac}");
        let keep = 1.0 / 0.95;
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == keep));
    }

    #[test]
    fn dropout_mask_mean_is_one() {
        for p in [0.0, 0.05, 0.25, 0.5] {
            let mut rng = RngState::new(7);
            let n = 100_000;
            let mask = rng.dropout_mask(n, 1, p).unwrap();
            let mean = mask.data().iter().sum::<f64>() / n as f64;
            // Var of one entry is p / (1 - p).
            let se = (p / (1.0 - p) / n as f64).sqrt();
            assert!((mean - 1.0).abs() <= 3.0 * se + 1e-12, "p={p} mean={mean}");
        }
    }

    #[test]
    fn dropout_is_deterministic_per_seed() {
        let a = RngState::new(9).dropout_mask(8, 8, 0.3).unwrap();
        let b = RngState::new(9).dropout_mask(8, 8, 0.3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_degenerate_and_errors() {
        let mut rng = RngState::new(1);
        assert_eq!(gaussian_sample(&mut rng, 3.2, 0.0).unwrap(), 3.2);
        assert!(gaussian_sample(&mut rng, 0.0, -1.0).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = RngState::new(2024);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.gaussian(0.0, 1.0).unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn gaussian_deterministic() {
        let mut a = RngState::new(5);
        let mut b = RngState::new(5);
        for _ in 0..10 {
            assert_eq!(
                a.gaussian(1.0, 2.0).unwrap().to_bits(),
                b.gaussian(1.0, 2.0).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn substreams_differ() {
        let mut a = RngState::substream(1, 0);
        let mut b = RngState::substream(1, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, k in 1usize..6, m in 1usize..6, q in 1usize..6) {
            let mut rng = RngState::new(seed);
            let a = rand_matrix(&mut rng, n, k);
            let b = rand_matrix(&mut rng, k, m);
            let c = rand_matrix(&mut rng, m, q);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                let scale = x.abs().max(y.abs()).max(1.0);
                prop_assert!((x - y).abs() <= 1e-9 * scale);
            }
        }
    }
}
