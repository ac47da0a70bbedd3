//! Small dense helpers plus a diagonal-storage format for the banded real
//! operators that dominate the propagator's inner loop.

use nalgebra::DMatrix;
use ndarray::Array2;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

pub fn to_complex(m: &Array2<f64>) -> Array2<C64> {
    m.mapv(|x| C64::new(x, 0.0))
}

pub fn dagger(m: &Array2<C64>) -> Array2<C64> {
    m.t().mapv(|z| z.conj())
}

pub fn commutator(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    a.dot(b) - b.dot(a)
}

pub fn trace(m: &Array2<C64>) -> C64 {
    m.diag().iter().sum()
}

/// Largest element of `|M - M†|`.
pub fn hermiticity_deviation(m: &Array2<C64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[[i, j]] - m[[j, i]].conj()).norm());
        }
    }
    worst
}

/// Largest element of `|M - Mᵀ|` for a real matrix.
pub fn symmetry_deviation(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[[i, j]] - m[[j, i]]).abs());
        }
    }
    worst
}

pub fn max_abs(m: &Array2<C64>) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

/// `c ρ c†` for a real operator `c`.
pub fn sandwich(c: &Array2<f64>, rho: &Array2<C64>) -> Array2<C64> {
    let cc = to_complex(c);
    cc.dot(rho).dot(&cc.t())
}

/// `Tr(A B)` for real `A` and complex `B`.
pub fn trace_product(a: &Array2<f64>, b: &Array2<C64>) -> C64 {
    let n = a.nrows();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..n {
        for k in 0..n {
            let aik = a[[i, k]];
            if aik != 0.0 {
                acc += b[[k, i]] * aik;
            }
        }
    }
    acc
}

/// Eigen-decomposition of a real symmetric matrix, eigenvalues ascending,
/// eigenvectors as columns.
pub fn symmetric_eigen(m: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = m.nrows();
    let dm = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    let eig = nalgebra::SymmetricEigen::try_new(dm, 1e-15, 10_000).ok_or(Error::EigenNoConvergence)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(i, j)| eig.eigenvectors[(i, order[j])]);
    Ok((values, vectors))
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eigenvalue_hermitian(m: &Array2<C64>) -> Result<f64> {
    let n = m.nrows();
    // symmetrise to strip round-off anti-Hermitian parts
    let dm = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[[i, j]] + m[[j, i]].conj()));
    let eig = nalgebra::SymmetricEigen::try_new(dm, 1e-15, 10_000).ok_or(Error::EigenNoConvergence)?;
    Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Real square matrix stored by diagonals: entry `values[r]` of the diagonal
/// with offset `o` is `M[r, r + o]`.
///
/// Only nonzero diagonals are kept, so banded operators (tridiagonal
/// vibrational couplings, the electronic flip at offset ±N) cost a handful
/// of vectorisable passes per product.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagOp {
    dim: usize,
    diagonals: Vec<(isize, Vec<f64>)>,
}

impl DiagOp {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, diagonals: Vec::new() }
    }

    pub fn from_dense(m: &Array2<f64>) -> Self {
        let dim = m.nrows();
        let d = dim as isize;
        let mut diagonals = Vec::new();
        for o in -(d - 1)..d {
            let mut values = vec![0.0; dim];
            let mut any = false;
            for r in row_range(dim, o) {
                let v = m[[r, (r as isize + o) as usize]];
                if v != 0.0 {
                    any = true;
                }
                values[r] = v;
            }
            if any {
                diagonals.push((o, values));
            }
        }
        Self { dim, diagonals }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.dim, self.dim));
        for (o, values) in &self.diagonals {
            for r in row_range(self.dim, *o) {
                m[[r, (r as isize + o) as usize]] += values[r];
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_zero(&self) -> bool {
        self.diagonals.is_empty()
    }

    pub fn offsets(&self) -> impl Iterator<Item = isize> + '_ {
        self.diagonals.iter().map(|(o, _)| *o)
    }

    /// Sum of two operators with scalar weights.
    pub fn combine(&self, wa: f64, other: &DiagOp, wb: f64) -> DiagOp {
        assert_eq!(self.dim, other.dim);
        let mut dense = self.to_dense() * wa;
        dense.scaled_add(wb, &other.to_dense());
        DiagOp::from_dense(&dense)
    }

    /// `out += s · M X` for a row-major `dim × dim` matrix `x`.
    #[inline]
    pub fn left_mul_add(&self, x: &[C64], s: f64, out: &mut [C64]) {
        let d = self.dim;
        let xf: &[f64] = bytemuck::cast_slice(x);
        let of: &mut [f64] = bytemuck::cast_slice_mut(out);
        for (o, values) in &self.diagonals {
            for r in row_range(d, *o) {
                let m = values[r] * s;
                if m == 0.0 {
                    continue;
                }
                let src = 2 * (r as isize + o) as usize * d;
                let src = &xf[src..src + 2 * d];
                let dst = &mut of[2 * r * d..2 * (r + 1) * d];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += m * b;
                }
            }
        }
    }

    /// `out += s · X M` for a row-major `dim × dim` matrix `x`.
    #[inline]
    pub fn right_mul_add(&self, x: &[C64], s: f64, out: &mut [C64]) {
        let d = self.dim;
        let xf: &[f64] = bytemuck::cast_slice(x);
        let of: &mut [f64] = bytemuck::cast_slice_mut(out);
        for (o, values) in &self.diagonals {
            // (X M)[r, j + o] += X[r, j] · M[j, j + o]
            let js = row_range(d, *o);
            let (j0, j1) = (js.start, js.end);
            let c0 = (j0 as isize + o) as usize;
            let width = 2 * (j1 - j0);
            let coeff: Vec<f64> = values[j0..j1].iter().flat_map(|m| [m * s, m * s]).collect();
            for r in 0..d {
                let src = &xf[2 * (r * d + j0)..2 * (r * d + j0) + width];
                let dst = &mut of[2 * (r * d + c0)..2 * (r * d + c0) + width];
                for ((a, b), m) in dst.iter_mut().zip(src).zip(&coeff) {
                    *a += b * m;
                }
            }
        }
    }
}

/// Rows `r` for which column `r + o` lies inside a `dim × dim` matrix.
#[inline]
fn row_range(dim: usize, o: isize) -> std::ops::Range<usize> {
    if o >= 0 {
        0..dim.saturating_sub(o as usize)
    } else {
        (-o) as usize..dim
    }
}
