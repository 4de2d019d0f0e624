//! Quadrature rotations, Heisenberg physicality and two-mode squeezing
//! ellipses.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::basis::{quadrature_index, Quadrature};
use crate::covariance::{CovarianceMatrix, MeanVector};
use crate::error::{Error, Result};
use crate::linalg::{self, hermitian_embedding, symplectic_matrix};
use crate::math::{atan2, db, hypot, sin_cos, sqrt};
use crate::VACUUM_VARIANCE;

/// Default tolerance on the minimum eigenvalue of `V + iΩ/2`.
pub const DEFAULT_PHYSICALITY_TOL: f64 = 1e-9;

/// The symplectic form `Ω = ⊕ [[0, 1], [-1, 0]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymplecticForm {
    n_modes: usize,
    matrix: DMatrix<f64>,
}

impl SymplecticForm {
    pub fn new(n_modes: usize) -> Result<Self> {
        if n_modes == 0 {
            return Err(Error::InvalidArgument("symplectic form needs at least one mode".into()));
        }
        Ok(Self { n_modes, matrix: symplectic_matrix(n_modes) })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

/// Counterclockwise rotation `[[cos, -sin], [sin, cos]]`.
pub fn rotation_2x2(theta: f64) -> Matrix2<f64> {
    let (s, c) = sin_cos(theta);
    Matrix2::new(c, -s, s, c)
}

/// `(I_n ⊗ R_θ) V (I_n ⊗ R_θ)^T`, applied block by block.
pub fn rotate(v: &CovarianceMatrix, theta: f64) -> CovarianceMatrix {
    let r = rotation_2x2(theta);
    let rt = r.transpose();
    let n = v.n_modes();
    let src = v.data();
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    for a in 0..n {
        for b in a..n {
            let blk = r * src.fixed_view::<2, 2>(2 * a, 2 * b) * rt;
            out.fixed_view_mut::<2, 2>(2 * a, 2 * b).copy_from(&blk);
            if a != b {
                out.fixed_view_mut::<2, 2>(2 * b, 2 * a).copy_from(&blk.transpose());
            }
        }
    }
    CovarianceMatrix::from_symmetrized(v.basis().clone(), out)
}

/// `(I_n ⊗ R_θ) m`.
pub fn rotate_mean(m: &MeanVector, theta: f64) -> MeanVector {
    let r = rotation_2x2(theta);
    let src = m.data();
    let mut out = DVector::zeros(src.len());
    for a in 0..src.len() / 2 {
        let q = r * Vector2::new(src[2 * a], src[2 * a + 1]);
        out[2 * a] = q[0];
        out[2 * a + 1] = q[1];
    }
    MeanVector::new(m.basis().clone(), out).expect("rotation preserves shape and finiteness")
}

/// Outcome of the Heisenberg test `V + iΩ/2 ⪰ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Physicality {
    pub is_physical: bool,
    /// Smallest eigenvalue of the Hermitian matrix `V + iΩ/2`.
    pub min_eig: f64,
}

/// Smallest eigenvalue of `V + iΩ/2`, from its real symmetric embedding.
pub fn heisenberg_min_eig(v: &DMatrix<f64>) -> Result<f64> {
    let om_half = symplectic_matrix(v.nrows() / 2) * 0.5;
    linalg::min_symmetric_eigenvalue(&hermitian_embedding(v, &om_half))
}

pub fn physicality_check(v: &CovarianceMatrix, tol: f64) -> Result<Physicality> {
    let min_eig = heisenberg_min_eig(v.data())?;
    Ok(Physicality { is_physical: min_eig >= -tol, min_eig })
}

/// Symplectic eigenvalues in ascending order.
///
/// With `V = L L^T`, `iΩV` is similar to `i L^T Ω L`, whose singular values
/// come in equal pairs `ν_k`.
pub fn symplectic_eigenvalues(v: &CovarianceMatrix) -> Result<Vec<f64>> {
    let l = linalg::cholesky_lower(v.data())?;
    let m = l.transpose() * symplectic_matrix(v.n_modes()) * &l;
    let mtm = m.transpose() * &m;
    let mut ev: Vec<f64> = linalg::symmetric_eigen(&mtm)?.eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev.chunks(2).map(|p| sqrt(0.5 * (p[0] + p[1]).max(0.0))).collect())
}

/// Which two quadratures of a mode pair `(i, j)` form the ellipse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairSelector {
    /// `p_i` and `x_j`.
    Px,
    /// `p_i` and `p_j`.
    Pp,
    /// `x_i` and `x_j`.
    Xx,
}

impl PairSelector {
    fn quadratures(self) -> (Quadrature, Quadrature) {
        match self {
            PairSelector::Px => (Quadrature::P, Quadrature::X),
            PairSelector::Pp => (Quadrature::P, Quadrature::P),
            PairSelector::Xx => (Quadrature::X, Quadrature::X),
        }
    }
}

/// Eigen-decomposition of a 2x2 quadrature-pair covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqueezingEllipse {
    pub larger: f64,
    pub smaller: f64,
    /// Unit eigenvectors for `larger` and `smaller`.
    pub axes: [Vector2<f64>; 2],
    /// `10 log10(smaller / (1/2))`; NaN if `smaller ≤ 0`.
    pub squeeze_db: f64,
    /// `10 log10(larger / (1/2))`.
    pub anti_squeeze_db: f64,
}

impl SqueezingEllipse {
    /// Closed-form eigen-analysis of `[[a, b], [b, c]]`.
    pub fn from_pair_covariance(m: &Matrix2<f64>) -> Self {
        let (a, b, c) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
        let mid = 0.5 * (a + c);
        let rad = hypot(0.5 * (a - c), b);
        let (larger, smaller) = (mid + rad, mid - rad);
        let phi = 0.5 * atan2(2.0 * b, a - c);
        let (s, co) = sin_cos(phi);
        let ratio_db = |x: f64| if x > 0.0 { db(x / VACUUM_VARIANCE) } else { f64::NAN };
        Self {
            larger,
            smaller,
            axes: [Vector2::new(co, s), Vector2::new(-s, co)],
            squeeze_db: ratio_db(smaller),
            anti_squeeze_db: ratio_db(larger),
        }
    }
}

/// 2x2 covariance of the selected quadratures of modes `i`, `j` after
/// rotating every mode by `theta`.
pub fn pair_covariance(
    v: &CovarianceMatrix,
    i: i32,
    j: i32,
    selector: PairSelector,
    theta: f64,
) -> Result<Matrix2<f64>> {
    if i == j {
        return Err(Error::InvalidArgument("pair analysis needs two distinct modes".into()));
    }
    let pi = v.basis().position_of(i)?;
    let pj = v.basis().position_of(j)?;
    let r = rotation_2x2(theta);
    let rot = |a: usize, b: usize| r * v.block_at(a, b) * r.transpose();
    let (bii, bij, bjj) = (rot(pi, pi), rot(pi, pj), rot(pj, pj));
    let (qa, qb) = selector.quadratures();
    let ia = quadrature_index(0, qa);
    let ib = quadrature_index(0, qb);
    Ok(Matrix2::new(bii[(ia, ia)], bij[(ia, ib)], bij[(ia, ib)], bjj[(ib, ib)]))
}

/// Squeezing ellipse of a quadrature pair at a fixed rotation.
pub fn two_mode_pair_analysis(
    v: &CovarianceMatrix,
    i: i32,
    j: i32,
    selector: PairSelector,
    theta: f64,
) -> Result<SqueezingEllipse> {
    Ok(SqueezingEllipse::from_pair_covariance(&pair_covariance(v, i, j, selector, theta)?))
}

/// Ellipse at every grid angle.
pub fn pair_scan(
    v: &CovarianceMatrix,
    i: i32,
    j: i32,
    selector: PairSelector,
    grid: &[f64],
) -> Result<Vec<(f64, SqueezingEllipse)>> {
    grid.iter().map(|&t| Ok((t, two_mode_pair_analysis(v, i, j, selector, t)?))).collect()
}

/// Rotation in `[0, π)` minimizing the smaller eigenvalue, refined by
/// golden-section search from a 64-point grid.
pub fn optimal_pair_analysis(
    v: &CovarianceMatrix,
    i: i32,
    j: i32,
    selector: PairSelector,
) -> Result<(f64, SqueezingEllipse)> {
    pair_covariance(v, i, j, selector, 0.0)?;
    let f = |t: f64| {
        two_mode_pair_analysis(v, i, j, selector, t).map(|e| e.smaller).unwrap_or(f64::INFINITY)
    };
    let (t, _) = linalg::grid_golden_min(f, 0.0, core::f64::consts::PI, 64, 1e-10);
    Ok((t, two_mode_pair_analysis(v, i, j, selector, t)?))
}

/// Default rotation grid: `0..=π` in 400 points.
pub fn default_theta_grid() -> Vec<f64> {
    linalg::linspace(0.0, core::f64::consts::PI, 400)
}

/// Ideal pure two-mode squeezed vacuum on modes `i`, `j` (squeeze `r`) with
/// every other mode in vacuum. Its `p_i - x_j` combination is squeezed at
/// `θ = π/4`.
pub fn two_mode_squeezed_vacuum(
    basis: crate::basis::ModeBasis,
    i: i32,
    j: i32,
    r: f64,
) -> Result<CovarianceMatrix> {
    if i == j {
        return Err(Error::InvalidArgument("two-mode squeezing needs two distinct modes".into()));
    }
    let a = basis.position_of(i)?;
    let b = basis.position_of(j)?;
    let ch = 0.5 * crate::math::cosh(2.0 * r);
    let sh = 0.5 * crate::math::sinh(2.0 * r);
    let mut d = DMatrix::identity(basis.dim(), basis.dim()) * VACUUM_VARIANCE;
    for k in 0..2 {
        d[(2 * a + k, 2 * a + k)] = ch;
        d[(2 * b + k, 2 * b + k)] = ch;
    }
    d[(2 * a, 2 * b)] = sh;
    d[(2 * b, 2 * a)] = sh;
    d[(2 * a + 1, 2 * b + 1)] = -sh;
    d[(2 * b + 1, 2 * a + 1)] = -sh;
    CovarianceMatrix::new(basis, d)
}
