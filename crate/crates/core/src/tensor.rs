//! Dense row-major `f32` matrices, a seeded generator, and the little-endian
//! payload convention shared by every file format in the crate.
//!
//! The generator is ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`), seeded
//! from a `u64` through `SeedableRng::seed_from_u64`. Independent streams for
//! the same seed are selected with the ChaCha stream id, so trajectory `i` of
//! a batch always sees the same numbers regardless of scheduling. Normal
//! deviates come from `rand_distr::StandardNormal` (ziggurat).

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "matrix entry ({}, {})",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// `1 × n` matrix; entries are not checked for finiteness.
    pub(crate) fn row_vector(data: Vec<f32>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn random_normal(rows: usize, cols: usize, std: f32, rng: &mut Rng) -> Self {
        let data = rng.normals(rows * cols).into_iter().map(|v| v * std).collect();
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f32] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn concat_rows(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot stack {} columns on {} columns",
                other.cols, self.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Adds `bias` to every row.
    pub(crate) fn add_row_vector(&mut self, bias: &[f32]) {
        debug_assert_eq!(bias.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
    }

    /// Column sums in `f64`, narrowed to `f32`.
    pub(crate) fn column_sums(&self) -> Vec<f32> {
        let mut acc = vec![0f64; self.cols];
        for row in self.data.chunks_exact(self.cols.max(1)) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += f64::from(*v);
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }
}

/// Which operand of a product is read transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Trans {
    N,
    T,
}

/// `c = beta * c + op(a) * op(b)`, strides chosen so transposes are free.
pub(crate) fn gemm(a: &Matrix, ta: Trans, b: &Matrix, tb: Trans, beta: f32, c: &mut Matrix) {
    let (m, k, rsa, csa) = match ta {
        Trans::N => (a.rows, a.cols, a.cols as isize, 1),
        Trans::T => (a.cols, a.rows, 1, a.cols as isize),
    };
    let (kb, n, rsb, csb) = match tb {
        Trans::N => (b.rows, b.cols, b.cols as isize, 1),
        Trans::T => (b.cols, b.rows, 1, b.cols as isize),
    };
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "output shape differs");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.data.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the dimensions and strides above describe exactly the storage
    // of `a`, `b` and `c`, which are distinct allocations.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub(crate) fn product(a: &Matrix, ta: Trans, b: &Matrix, tb: Trans) -> Matrix {
    let m = if ta == Trans::N { a.rows } else { a.cols };
    let n = if tb == Trans::N { b.cols } else { b.rows };
    let mut c = Matrix::zeros(m, n);
    gemm(a, ta, b, tb, 0.0, &mut c);
    c
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let c = product(a, Trans::N, b, Trans::N);
    if !c.is_finite() {
        return Err(Error::numeric("matmul result"));
    }
    Ok(c)
}

/// Per-column sum of squares, accumulated in `f64`.
pub fn column_sumsq(m: &Matrix) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Err(Error::Shape("column_sumsq of an empty matrix".into()));
    }
    let mut acc = vec![0f64; m.cols];
    accumulate_column_sumsq(m, &mut acc);
    Ok(acc)
}

pub(crate) fn accumulate_column_sumsq(m: &Matrix, acc: &mut [f64]) {
    debug_assert_eq!(acc.len(), m.cols);
    for row in m.data.chunks_exact(m.cols.max(1)) {
        for (a, v) in acc.iter_mut().zip(row) {
            let v = f64::from(*v);
            *a += v * v;
        }
    }
}

/// Seeded ChaCha8 generator.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent stream `stream` of `seed`; stream 0 equals `Rng::new(seed)`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f32 {
        self.inner.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f32 {
        self.inner.random::<f32>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }
}

/// `n` standard-normal draws from `rng`.
pub fn gauss_sample(rng: &mut Rng, n: usize) -> Result<Vec<f32>> {
    if n == 0 {
        return Err(Error::Parameter("gauss_sample needs n >= 1".into()));
    }
    Ok(rng.normals(n))
}

pub(crate) fn f32_to_le_bytes(values: &[f32], out: &mut Vec<u8>) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn f32_from_le_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}
