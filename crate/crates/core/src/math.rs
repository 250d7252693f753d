//! Dense 64-bit linear algebra, elementwise activations and the project RNG.
//!
//! Everything here is deliberately small: row-major matrices, owned vectors,
//! and a seeded ChaCha stream so that checkpoints and tests reproduce across
//! platforms.

use std::ops::{Deref, DerefMut};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GroveError, Result};

/// Owned dense vector.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Vector(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(GroveError::dim("dot", self.len(), other.len()));
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &Vector) -> Result<()> {
        if self.len() != other.len() {
            return Err(GroveError::dim("axpy", self.len(), other.len()));
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scaled(&self, scale: f64) -> Vector {
        Vector(self.0.iter().map(|v| v * scale).collect())
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(GroveError::dim("sub", self.len(), other.len()));
        }
        Ok(Vector(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn hadamard(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(GroveError::dim("hadamard", self.len(), other.len()));
        }
        Ok(Vector(
            self.0.iter().zip(&other.0).map(|(a, b)| a * b).collect(),
        ))
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector(data)
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

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
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
            return Err(GroveError::dim("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(GroveError::dim("Matrix::from_rows", cols, row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// `W · x`
    pub fn matvec(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(GroveError::dim("matvec", self.cols, x.len()));
        }
        Ok(self
            .data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| row.iter().zip(x.iter()).map(|(w, v)| w * v).sum())
            .collect::<Vec<f64>>()
            .into())
    }

    /// `Wᵀ · y`
    pub fn matvec_t(&self, y: &Vector) -> Result<Vector> {
        if y.len() != self.rows {
            return Err(GroveError::dim("matvec_t", self.rows, y.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += yr * w;
            }
        }
        Ok(out.into())
    }

    /// `self += scale · u vᵀ`
    pub fn add_outer(&mut self, scale: f64, u: &Vector, v: &Vector) -> Result<()> {
        if u.len() != self.rows {
            return Err(GroveError::dim("add_outer", self.rows, u.len()));
        }
        if v.len() != self.cols {
            return Err(GroveError::dim("add_outer", self.cols, v.len()));
        }
        for (r, &ur) in u.iter().enumerate() {
            let s = scale * ur;
            if s == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, vc) in row.iter_mut().zip(v.iter()) {
                *w += s * vc;
            }
        }
        Ok(())
    }

    /// `self += scale · other`
    pub fn axpy(&mut self, scale: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(GroveError::dim(
                "Matrix::axpy",
                self.data.len(),
                other.data.len(),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Free-function form of [`Matrix::matvec`].
pub fn matvec(w: &Matrix, x: &Vector) -> Result<Vector> {
    w.matvec(x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

/// d/dx [x·σ(x)] = σ(x)·(1 + x·(1 − σ(x)))
pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu(v: &Vector) -> Vector {
    v.iter().map(|&x| silu_scalar(x)).collect::<Vec<_>>().into()
}

pub fn sigmoid(v: &Vector) -> Vector {
    v.iter()
        .map(|&x| sigmoid_scalar(x))
        .collect::<Vec<_>>()
        .into()
}

pub fn softmax(v: &Vector) -> Result<Vector> {
    if v.is_empty() {
        return Err(GroveError::EmptyInput("softmax"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps
        .into_iter()
        .map(|e| e / total)
        .collect::<Vec<_>>()
        .into())
}

/// Root mean square; zero for an empty vector.
pub fn rms(v: &Vector) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Seeded ChaCha8 stream. Single owner; clone to fork an identical stream.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from `(seed, stream)`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal_vector(&mut self, len: usize, sigma: f64) -> Vector {
        (0..len)
            .map(|_| sigma * self.standard_normal())
            .collect::<Vec<_>>()
            .into()
    }

    /// `k` distinct indices drawn uniformly from `0..n`.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }
}

pub fn normal_init(rng: &mut Rng, rows: usize, cols: usize, sigma: f64) -> Matrix {
    assert!(sigma >= 0.0, "normal_init: sigma must be non-negative");
    if sigma == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    let data = (0..rows * cols)
        .map(|_| sigma * rng.standard_normal())
        .collect();
    Matrix { rows, cols, data }
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    fn v(data: &[f64]) -> Vector {
        data.to_vec().into()
    }

    #[test]
    fn matvec_examples() {
        assert_eq!(
            Matrix::identity(3).matvec(&v(&[1.0, 2.0, 3.0])).unwrap(),
            v(&[1.0, 2.0, 3.0])
        );
        assert_eq!(
            Matrix::zeros(2, 3).matvec(&v(&[4.0, -1.0, 7.0])).unwrap(),
            v(&[0.0, 0.0])
        );
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matvec(&w, &v(&[1.0, 1.0])).unwrap(), v(&[3.0, 7.0]));
    }

    #[test]
    fn matvec_dimension_mismatch() {
        let err = Matrix::zeros(2, 3).matvec(&v(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, GroveError::DimensionMismatch { .. }));
    }

    #[test]
    fn matvec_t_matches_explicit_transpose() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(
            w.matvec_t(&v(&[1.0, -1.0])).unwrap(),
            v(&[-3.0, -3.0, -3.0])
        );
    }

    #[test]
    fn silu_examples() {
        assert_eq!(silu(&v(&[0.0]))[0], 0.0);
        let big = silu(&v(&[50.0]))[0];
        assert!((big - 50.0).abs() < 1e-12);
        // independent scalar evaluation of x / (1 + e^{-x})
        let x: f64 = -0.5;
        let oracle = x / (1.0 + (-x).exp());
        assert!((silu(&v(&[x]))[0] - oracle).abs() < 1e-15);
    }

    #[test]
    fn silu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu_scalar(x + h) - silu_scalar(x - h)) / (2.0 * h);
            assert!((silu_grad_scalar(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&v(&[0.0, 0.0])).unwrap(), v(&[0.5, 0.5]));
        assert_eq!(softmax(&v(&[1000.0, 1000.0])).unwrap(), v(&[0.5, 0.5]));
        let p = softmax(&v(&[1f64.ln(), 3f64.ln()])).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert!(matches!(
            softmax(&Vector::zeros(0)),
            Err(GroveError::EmptyInput(_))
        ));
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(&v(&[0.0]))[0], 0.5);
        let s = sigmoid(&v(&[-1000.0]))[0];
        assert!((0.0..1e-300).contains(&s));
        let pair = sigmoid(&v(&[2.5, -2.5]));
        assert!((pair[0] + pair[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rms_examples() {
        assert_eq!(rms(&v(&[0.0, 0.0, 0.0])), 0.0);
        assert!((rms(&v(&[3.0, 4.0])) - 12.5f64.sqrt()).abs() < 1e-15);
        assert!((rms(&v(&[-2.5; 7])) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn normal_init_zero_sigma_and_determinism() {
        let mut rng = Rng::seed(3);
        assert!(normal_init(&mut rng, 4, 5, 0.0).is_zero());
        let a = normal_init(&mut Rng::seed(11), 8, 8, 0.006);
        let b = normal_init(&mut Rng::seed(11), 8, 8, 0.006);
        assert_eq!(a, b);
        let c = normal_init(&mut Rng::seed(12), 8, 8, 0.006);
        assert_ne!(a, c);
    }

    #[test]
    fn normal_init_sample_std() {
        let m = normal_init(&mut Rng::seed(2024), 1000, 1000, 0.006);
        let n = m.data().len() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.006 * 0.01);
        assert!((var.sqrt() / 0.006 - 1.0).abs() < 0.02);
    }

    fn finite_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, len)
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(x in finite_vec(1..40), c in -500.0f64..500.0) {
            let p = softmax(&x.clone().into()).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let q = softmax(&shifted.into()).unwrap();
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn sigmoid_is_symmetric(x in -800.0f64..800.0) {
            prop_assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn rms_zero_iff_zero_vector(x in finite_vec(1..20)) {
            let is_zero = x.iter().all(|&v| v == 0.0);
            prop_assert_eq!(rms(&x.into()) == 0.0, is_zero);
        }

        #[test]
        fn matvec_is_linear(
            w in prop::collection::vec(-5.0f64..5.0, 12),
            x in finite_vec(4..5),
            y in finite_vec(4..5),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let w = Matrix::from_vec(3, 4, w).unwrap();
            let (x, y): (Vector, Vector) = (x.into(), y.into());
            let mut combo = x.scaled(a);
            combo.axpy(b, &y).unwrap();
            let lhs = w.matvec(&combo).unwrap();
            let mut rhs = w.matvec(&x).unwrap().scaled(a);
            rhs.axpy(b, &w.matvec(&y).unwrap()).unwrap();
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() <= 1e-9 * (1.0 + l.abs().max(r.abs())));
            }
        }
    }
}
