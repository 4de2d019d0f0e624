//! Dense linear-algebra helpers shared by the Gaussian, projection and
//! dynamics code.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// `⊕ [[0, 1], [-1, 0]]` over `n_modes` modes.
pub fn symplectic_matrix(n_modes: usize) -> DMatrix<f64> {
    let mut om = DMatrix::zeros(2 * n_modes, 2 * n_modes);
    for k in 0..n_modes {
        om[(2 * k, 2 * k + 1)] = 1.0;
        om[(2 * k + 1, 2 * k)] = -1.0;
    }
    om
}

/// Real symmetric embedding `[[A, -B], [B, A]]` of the Hermitian matrix
/// `A + iB` (`A` symmetric, `B` antisymmetric). Its spectrum is that of
/// `A + iB` with every eigenvalue doubled.
pub fn hermitian_embedding(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut e = DMatrix::zeros(2 * n, 2 * n);
    e.view_mut((0, 0), (n, n)).copy_from(a);
    e.view_mut((n, n), (n, n)).copy_from(a);
    e.view_mut((n, 0), (n, n)).copy_from(b);
    e.view_mut((0, n), (n, n)).copy_from(&(-b));
    e
}

/// Inverse of [`hermitian_embedding`] for an arbitrary `2n x 2n` matrix,
/// returning the nearest `(A, B)` pair: `A = (E11 + E22)/2`,
/// `B = (E21 - E12)/2`, then symmetric / antisymmetric parts.
pub fn split_embedding(e: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = e.nrows() / 2;
    let e11 = e.view((0, 0), (n, n));
    let e22 = e.view((n, n), (n, n));
    let e12 = e.view((0, n), (n, n));
    let e21 = e.view((n, 0), (n, n));
    let a = (e11 + e22) * 0.5;
    let b = (e21 - e12) * 0.5;
    let a_sym = (&a + a.transpose()) * 0.5;
    let b_anti = (&b - b.transpose()) * 0.5;
    (a_sym, b_anti)
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// Eigen-decomposition of a symmetric matrix.
pub fn symmetric_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    check_finite(m)?;
    SymmetricEigen::try_new(m.clone(), f64::EPSILON, 0).ok_or(Error::EigenFailure)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    Ok(symmetric_eigen(m)?.eigenvalues.min())
}

/// Projection onto the positive-semidefinite cone in the Frobenius norm:
/// negative eigenvalues are set to zero. Also returns the smallest
/// eigenvalue before clipping.
pub fn psd_clip(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let eig = symmetric_eigen(m)?;
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return Ok((m.clone(), min));
    }
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        let w = lam.max(0.0);
        scaled.column_mut(k).scale_mut(w);
    }
    let out = scaled * q.transpose();
    Ok(((&out + out.transpose()) * 0.5, min))
}

/// Lower Cholesky factor, or `NotPositiveDefinite`.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_finite(m)?;
    m.clone().cholesky().map(|c| c.unpack()).ok_or(Error::NotPositiveDefinite)
}

/// A factor `F` with `F F^T = m` for a symmetric positive-semidefinite `m`:
/// Cholesky when it succeeds, otherwise the symmetric square root with
/// negative eigenvalues (rounding noise) clipped.
pub fn psd_factor(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    if let Ok(l) = cholesky_lower(m) {
        return Ok(l);
    }
    let eig = symmetric_eigen(m)?;
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.min() < -tol * scale {
        return Err(Error::NotPositiveDefinite);
    }
    let mut f = eig.eigenvectors.clone();
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        f.column_mut(k).scale_mut(crate::math::sqrt(lam.max(0.0)));
    }
    Ok(f)
}

/// Frobenius norm.
pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

/// `n` evenly spaced points from `start` to `end` inclusive.
pub fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => alloc::vec![start],
        _ => {
            let step = (end - start) / (n - 1) as f64;
            (0..n).map(|k| if k == n - 1 { end } else { start + step * k as f64 }).collect()
        }
    }
}

/// Minimizer of `f` on `[lo, hi]`: coarse grid of `n_grid` points, then
/// golden-section refinement inside the bracket around the best grid point.
/// Returns `(x, f(x))`.
pub fn grid_golden_min<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, n_grid: usize, tol: f64) -> (f64, f64) {
    let grid = linspace(lo, hi, n_grid.max(3));
    let values: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = k;
        }
    }
    let a0 = grid[best.saturating_sub(1)];
    let b0 = grid[(best + 1).min(grid.len() - 1)];
    let (x, fx) = golden_section(&mut f, a0, b0, tol);
    if fx < values[best] {
        (x, fx)
    } else {
        (grid[best], values[best])
    }
}

fn golden_section<F: FnMut(f64) -> f64>(f: &mut F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = 0.618_033_988_749_894_9;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if (b - a).abs() <= tol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Solves `m x = rhs` by LU.
pub fn solve(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    check_finite(m)?;
    m.clone().lu().solve(rhs).ok_or(Error::EigenFailure)
}
