//! Dense row-major matrices and the handful of norms the toolkit needs:
//! spectral (leading singular value by power iteration), Frobenius, the
//! ℓ₁ operator norm, and the gradient of the spectral norm.

use serde::Serialize;
use std::ops::{Index, IndexMut};

use crate::error::{shape_err, Error, Result};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Smallest gap σ₁ − σ₂ at which the spectral norm is treated as differentiable.
pub const SPECTRAL_GAP_MIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err("Matrix::new", rows * cols, data.len()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
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

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(shape_err("Matrix::from_rows", cols, bad.len()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Builds a matrix entry by entry. Panics if `f` yields a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let x = f(i, j);
                assert!(x.is_finite(), "Matrix::from_fn produced {x} at ({i}, {j})");
                data.push(x);
            }
        }
        Self { rows, cols, data }
    }

    /// `a bᵀ`
    pub fn outer(a: &[f64], b: &[f64]) -> Self {
        Self::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw entries. Callers must keep them finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `M x`. Panics on dimension mismatch.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        self.data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| dot(row, x))
            .collect()
    }

    /// `Mᵀ y`. Panics on dimension mismatch.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows, "matvec_t dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(i)) {
                *o += w * yi;
            }
        }
        out
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.scale_in_place(c);
        out
    }

    pub fn scale_in_place(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }

    /// `self += c · other`
    pub fn add_scaled(&mut self, other: &Matrix, c: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, &x) in sums.iter_mut().zip(self.row(i)) {
                *s += x;
            }
        }
        sums
    }

    pub fn is_nonnegative(&self) -> bool {
        self.data.iter().all(|&x| x >= 0.0)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Leading singular value with its unit singular vectors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingularTriplet {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

enum Stop {
    /// ‖Mᵀu − σv‖ ≤ tol·σ
    Residual,
    /// As `Residual`, or σ stops moving (relative change below tol·1e-3).
    ResidualOrStall,
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm2(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn power_iterate(
    m: &Matrix,
    start: Vec<f64>,
    tol: f64,
    max_iter: usize,
    stop: Stop,
) -> Result<SingularTriplet> {
    let mut v = normalized(start);
    let mut prev_sigma = 0.0;
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let w = m.matvec(&v);
        let sigma = norm2(&w);
        if sigma == 0.0 {
            return Ok(SingularTriplet {
                sigma: 0.0,
                u: unit(m.rows, 0),
                v,
            });
        }
        let u: Vec<f64> = w.iter().map(|x| x / sigma).collect();
        let z = m.matvec_t(&u);
        residual = z
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - sigma * b).powi(2))
            .sum::<f64>()
            .sqrt();
        let stalled = matches!(stop, Stop::ResidualOrStall)
            && (sigma - prev_sigma).abs() <= tol * 1e-3 * sigma;
        if residual <= tol * sigma || stalled {
            return Ok(SingularTriplet { sigma, u, v });
        }
        prev_sigma = sigma;
        v = normalized(z);
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        sigma: prev_sigma,
        residual,
    })
}

fn unit(n: usize, k: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    if k < n {
        e[k] = 1.0;
    }
    e
}

fn check_args(m: &Matrix, tol: f64) -> Result<()> {
    if m.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tol must be > 0, got {tol}"
        )));
    }
    Ok(())
}

/// Power iteration from the normalized all-ones vector. If the result is
/// provably not the leading value (some column is longer than σ, or the
/// start vector lies in the null space) it restarts from the longest column.
fn leading_triplet(m: &Matrix, tol: f64, max_iter: usize, stop: Stop) -> Result<SingularTriplet> {
    let stall = matches!(stop, Stop::ResidualOrStall);
    let first = power_iterate(m, vec![1.0; m.cols], tol, max_iter, stop)?;
    let (k, longest) = (0..m.cols)
        .map(|j| (j, norm2(&m.column(j))))
        .fold((0, 0.0), |acc, c| if c.1 > acc.1 { c } else { acc });
    if first.sigma >= longest * (1.0 - 1e-12) {
        return Ok(first);
    }
    let stop = if stall {
        Stop::ResidualOrStall
    } else {
        Stop::Residual
    };
    let second = power_iterate(m, unit(m.cols, k), tol, max_iter, stop)?;
    Ok(if second.sigma > first.sigma {
        second
    } else {
        first
    })
}

/// Largest singular value of `m`.
pub fn spectral_norm(m: &Matrix, tol: f64, max_iter: usize) -> Result<f64> {
    check_args(m, tol)?;
    leading_triplet(m, tol, max_iter, Stop::ResidualOrStall).map(|t| t.sigma)
}

/// `spectral_norm` with the default tolerance and iteration cap.
pub fn spectral_norm_default(m: &Matrix) -> Result<f64> {
    spectral_norm(m, DEFAULT_TOL, DEFAULT_MAX_ITER)
}

/// Leading singular triplet, signed so that the first nonzero entry of `v`
/// is positive.
pub fn top_singular_pair(m: &Matrix, tol: f64, max_iter: usize) -> Result<SingularTriplet> {
    check_args(m, tol)?;
    let mut t = leading_triplet(m, tol, max_iter, Stop::Residual)?;
    if let Some(&first) = t.v.iter().find(|x| **x != 0.0) {
        if first < 0.0 {
            t.u.iter_mut().for_each(|x| *x = -*x);
            t.v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(t)
}

/// Second singular value, by power iteration on `MᵀM − σ₁² v₁v₁ᵀ`
/// restricted to the orthogonal complement of `v₁`.
fn second_singular_value(m: &Matrix, top: &SingularTriplet, max_iter: usize) -> f64 {
    let n = m.cols;
    if n < 2 || m.rows < 2 {
        return 0.0;
    }
    let project = |x: &mut Vec<f64>| {
        let c = dot(x, &top.v);
        x.iter_mut().zip(&top.v).for_each(|(a, b)| *a -= c * b);
    };
    let mut x = vec![1.0; n];
    project(&mut x);
    if norm2(&x) < 1e-8 {
        x = unit(n, 1);
        project(&mut x);
    }
    let mut x = normalized(x);
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let mut y = m.matvec_t(&m.matvec(&x));
        project(&mut y);
        let next = dot(&x, &y);
        let ny = norm2(&y);
        if ny == 0.0 {
            return 0.0;
        }
        let done = (next - lambda).abs() <= 1e-14 * next.abs().max(f64::MIN_POSITIVE);
        lambda = next;
        if done {
            break;
        }
        x = y.into_iter().map(|v| v / ny).collect();
    }
    lambda.max(0.0).sqrt()
}

/// Gradient of `‖M‖₂` with respect to the entries of `M`, i.e. `u₁v₁ᵀ`.
///
/// Fails with [`Error::DegenerateSpectrum`] when σ₁ − σ₂ ≤ [`SPECTRAL_GAP_MIN`]
/// (including the zero matrix), where the norm is not differentiable.
pub fn spectral_grad(m: &Matrix) -> Result<Matrix> {
    let top = top_singular_pair(m, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let sigma2 = second_singular_value(m, &top, DEFAULT_MAX_ITER);
    if top.sigma - sigma2 <= SPECTRAL_GAP_MIN {
        return Err(Error::DegenerateSpectrum {
            sigma1: top.sigma,
            sigma2,
        });
    }
    Ok(Matrix::outer(&top.u, &top.v))
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    norm2(&m.data)
}

/// Induced ℓ₁ norm: the largest column sum of absolute values.
pub fn l1_matrix_norm(m: &Matrix) -> f64 {
    let mut sums = vec![0.0; m.cols];
    for i in 0..m.rows {
        for (s, x) in sums.iter_mut().zip(m.row(i)) {
            *s += x.abs();
        }
    }
    sums.into_iter().fold(0.0, f64::max)
}

#[cfg(test)]
pub(crate) mod oracle {
    use super::Matrix;

    /// Singular values of `m` (descending) with left and right singular
    /// vectors, by one-sided Jacobi rotations on the columns.
    pub fn jacobi_svd(m: &Matrix) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (rows, cols) = m.shape();
        let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
        let mut v: Vec<Vec<f64>> = (0..cols)
            .map(|j| (0..cols).map(|i| f64::from(u8::from(i == j))).collect())
            .collect();
        for _sweep in 0..100 {
            let mut off = 0.0f64;
            for p in 0..cols {
                for q in p + 1..cols {
                    let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                    let beta: f64 = a[q].iter().map(|x| x * x).sum();
                    let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                    if gamma == 0.0 {
                        continue;
                    }
                    off = off.max(gamma.abs() / (alpha * beta).sqrt());
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let t = if zeta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..rows {
                        let (x, y) = (a[p][i], a[q][i]);
                        a[p][i] = c * x - s * y;
                        a[q][i] = s * x + c * y;
                    }
                    for i in 0..cols {
                        let (x, y) = (v[p][i], v[q][i]);
                        v[p][i] = c * x - s * y;
                        v[q][i] = s * x + c * y;
                    }
                }
            }
            if off < 1e-15 {
                break;
            }
        }
        let mut triples: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..cols)
            .map(|j| {
                let s = a[j].iter().map(|x| x * x).sum::<f64>().sqrt();
                let u = a[j]
                    .iter()
                    .map(|x| if s > 0.0 { x / s } else { 0.0 })
                    .collect();
                (s, u, v[j].clone())
            })
            .collect();
        triples.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
        let sig = triples.iter().map(|t| t.0).collect();
        let us = triples.iter().map(|t| t.1.clone()).collect();
        let vs = triples.into_iter().map(|t| t.2).collect();
        (sig, us, vs)
    }
}
