//! Nearest physical covariance under the error-weighted Chebyshev objective
//! `max_ab |Vq_ab - V_ab| / σ_ab` subject to `V + iΩ/2 ⪰ 0`.
//!
//! The optimum is found by bisection on the objective level `t`. At a fixed
//! `t` feasibility is decided by Dykstra's alternating projections between
//! the box `|V - Vq| ≤ t σ` and the Heisenberg cone, both handled as pairs
//! `(A, B)` of a Hermitian matrix `A + iB` (box: `B = Ω/2`).

use alloc::format;

use nalgebra::{DMatrix, Dyn, SymmetricEigen};

use crate::covariance::CovarianceMatrix;
use crate::error::{Error, Result};
use crate::gaussian::heisenberg_min_eig;
use crate::linalg::{hermitian_embedding, psd_clip, split_embedding, symmetric_eigen, symplectic_matrix};
use crate::math::sqrt;
use crate::reconstruction::ErrorMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionOptions {
    /// Relative width of the final bisection bracket.
    pub tol_bisect: f64,
    /// Tolerance on the minimum eigenvalue of `V + iΩ/2`.
    pub feas_tol: f64,
    /// Dykstra iterations per feasibility test.
    pub max_iter: usize,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        Self { tol_bisect: 1e-6, feas_tol: 1e-9, max_iter: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub v: CovarianceMatrix,
    /// `max_ab |Vq_ab - V_ab| / σ_ab` over elements with `σ_ab > 0`.
    pub objective: f64,
    /// Dykstra iterations summed over all feasibility tests.
    pub iterations: usize,
    /// `max(0, -min_eig)`.
    pub constraint_violation: f64,
    pub min_eig: f64,
    /// Objective of the eigen-clip baseline.
    pub baseline_objective: f64,
    /// False when a feasibility test hit `max_iter`; the best point found is
    /// still returned.
    pub converged: bool,
}

/// Outcome of one fixed-level feasibility test.
#[derive(Debug, Clone, PartialEq)]
pub struct Feasibility {
    pub feasible: bool,
    /// Physical point whose objective is within rounding of `t`.
    pub candidate: Option<DMatrix<f64>>,
    /// Level up to which infeasibility is certified, when a separating
    /// matrix was found.
    pub lower_bound: Option<f64>,
    pub iterations: usize,
    pub hit_max_iter: bool,
    /// Final distance between the two Dykstra iterates.
    pub gap: f64,
    /// Last box iterate.
    pub box_iterate: DMatrix<f64>,
}

/// Pinned elements (`σ = 0`) count as held when they move by at most
/// `pin_tol`.
fn objective(vq: &DMatrix<f64>, sigma: &DMatrix<f64>, v: &DMatrix<f64>, pin_tol: f64) -> f64 {
    let mut t: f64 = 0.0;
    for (k, &s) in sigma.iter().enumerate() {
        let d = (vq[k] - v[k]).abs();
        if s > 0.0 {
            t = t.max(d / s);
        } else if d > pin_tol {
            return f64::INFINITY;
        }
    }
    t
}

const CHECK_EVERY: usize = 5;
const ALPHA_STEPS: usize = 7;
const SEPARATION_TOL: f64 = 1e-10;

fn box_project(vq: &DMatrix<f64>, sigma: &DMatrix<f64>, t: f64, a: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| {
        let r = t * sigma[(i, j)];
        a[(i, j)].clamp(vq[(i, j)] - r, vq[(i, j)] + r)
    })
}

/// Farkas test: with `W ⪰ 0` built from the negative eigenvectors of the box
/// iterate, `max_box <W, X> < 0` proves that the box misses the cone.
/// Returns the largest level the certificate covers.
fn separated(
    eig: &SymmetricEigen<f64, Dyn>,
    vq: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    t: f64,
    half_omega: &DMatrix<f64>,
) -> Option<f64> {
    let d2 = eig.eigenvalues.len();
    let mut w = DMatrix::zeros(d2, d2);
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l < 0.0 {
            let v = eig.eigenvectors.column(k);
            w.ger(-l, &v, &v, 1.0);
        }
    }
    let scale = w.norm();
    if scale == 0.0 {
        return None;
    }
    let (w11, w12, w21, w22) = {
        let n = d2 / 2;
        (w.view((0, 0), (n, n)), w.view((0, n), (n, n)), w.view((n, 0), (n, n)), w.view((n, n), (n, n)))
    };
    let wa = w11 + w22;
    let wb = w21 - w12;
    let mut fixed = wb.dot(half_omega);
    let mut magnitude = fixed.abs();
    let mut slope = 0.0;
    for k in 0..wa.len() {
        fixed += wa[k] * vq[k];
        slope += wa[k].abs() * sigma[k];
        magnitude += (wa[k] * vq[k]).abs();
    }
    // Every level below `bound` is separated by the same W.
    let margin = -fixed - SEPARATION_TOL * magnitude.max(scale);
    if margin <= 0.0 {
        return None;
    }
    let bound = if slope > 0.0 { margin / slope } else { f64::INFINITY };
    (t < bound).then_some(bound)
}

/// The box iterate with its diagonal moved a fraction `alpha` of the way to
/// the top of the box, then shifted by the identity onto the cone. Also
/// returns the eigen-decomposition of the unshifted embedding.
fn inflated_candidate(
    x_a: &DMatrix<f64>,
    target: &DMatrix<f64>,
    sig: &DMatrix<f64>,
    t: f64,
    alpha: f64,
    half_omega: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, SymmetricEigen<f64, Dyn>)> {
    let dim = x_a.nrows();
    let mut v = x_a.clone();
    for i in 0..dim {
        let top = target[(i, i)] + t * sig[(i, i)];
        v[(i, i)] += alpha * (top - v[(i, i)]);
    }
    let eig = symmetric_eigen(&hermitian_embedding(&v, half_omega))?;
    let eps = (-eig.eigenvalues.min()).max(0.0);
    Ok((v + DMatrix::identity(dim, dim) * eps, eig))
}

/// Shifts `a` by the smallest multiple of the identity that makes
/// `a + iΩ/2 ⪰ 0`. Returns the shifted matrix and its minimum eigenvalue.
fn heisenberg_shift(a: DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let m = heisenberg_min_eig(&a)?;
    if m >= 0.0 {
        return Ok((a, m));
    }
    let n = a.nrows();
    let shifted = a + DMatrix::identity(n, n) * (-m);
    let m2 = heisenberg_min_eig(&shifted)?;
    Ok((shifted, m2))
}

fn validate(vq: &CovarianceMatrix, sigma: &ErrorMatrix) -> Result<()> {
    if vq.basis() != sigma.basis() {
        return Err(Error::BasisMismatch);
    }
    Ok(())
}

/// Decides whether the box at level `t` meets the Heisenberg cone.
pub fn feasibility_test(
    vq: &CovarianceMatrix,
    sigma: &ErrorMatrix,
    t: f64,
    opts: &ProjectionOptions,
) -> Result<Feasibility> {
    validate(vq, sigma)?;
    feasibility_from(vq, sigma, t, opts, vq.data())
}

/// Dykstra started from the box projection of `start`.
fn feasibility_from(
    vq: &CovarianceMatrix,
    sigma: &ErrorMatrix,
    t: f64,
    opts: &ProjectionOptions,
    start: &DMatrix<f64>,
) -> Result<Feasibility> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!("objective level must be finite and >= 0, got {t}")));
    }
    let target = vq.data();
    let sig = sigma.data();
    let dim = target.nrows();
    let half_omega = symplectic_matrix(dim / 2) * 0.5;
    let sigma_min = sig.iter().copied().filter(|s| *s > 0.0).fold(f64::INFINITY, f64::min);
    let mut accept = if sigma_min.is_finite() { 0.5 * opts.tol_bisect * t * sigma_min } else { 0.0 };
    if (0..dim).any(|i| sig[(i, i)] == 0.0) {
        accept = accept.min(opts.feas_tol);
    }

    let mut x_a = box_project(target, sig, t, start);
    let mut p_a = DMatrix::zeros(dim, dim);
    let mut p_b = DMatrix::zeros(dim, dim);
    let mut q_a = DMatrix::zeros(dim, dim);
    let mut history: alloc::vec::Vec<f64> = alloc::vec::Vec::new();
    let mut gap = f64::INFINITY;

    for k in 1..=opts.max_iter {
        // Cone step from (x + p); the box iterate always has B = Ω/2.
        let (clipped, _) = psd_clip(&hermitian_embedding(&(&x_a + &p_a), &(&half_omega + &p_b)))?;
        let (y_a, y_b) = split_embedding(&clipped);
        p_a = &x_a + &p_a - &y_a;
        p_b = &half_omega + &p_b - &y_b;
        // Box step from (y + q); the B component of q is absorbed because the
        // box pins B, so only its A part is tracked.
        let new_x = box_project(target, sig, t, &(&y_a + &q_a));
        q_a = &y_a + &q_a - &new_x;
        x_a = new_x;

        let da = (&x_a - &y_a).norm();
        let db = (&half_omega - &y_b).norm();
        gap = sqrt(da * da + db * db);
        // The box iterate shifted onto the cone is accepted when it stays
        // within the level up to half the bisection tolerance.
        if gap <= accept || k % CHECK_EVERY == 0 {
            // Raising the diagonal to the top of the box adds a PSD term, so
            // the inflated point is at least as physical as the iterate.
            let (cand, eig) = inflated_candidate(&x_a, target, sig, t, 1.0, &half_omega)?;
            let level = t * (1.0 + 0.5 * opts.tol_bisect);
            if objective(target, sig, &cand, opts.feas_tol) <= level {
                // Back off the inflation as far as the level allows.
                let mut best = cand;
                let (mut lo, mut hi) = (0.0, 1.0);
                for step in 0..ALPHA_STEPS {
                    let alpha = if step == 0 { 0.0 } else { 0.5 * (lo + hi) };
                    let (c, _) = inflated_candidate(&x_a, target, sig, t, alpha, &half_omega)?;
                    if objective(target, sig, &c, opts.feas_tol) <= level {
                        best = c;
                        hi = alpha;
                        if step == 0 {
                            break;
                        }
                    } else {
                        lo = alpha;
                    }
                }
                return Ok(Feasibility {
                    feasible: true,
                    candidate: Some(best),
                    lower_bound: None,
                    iterations: k,
                    hit_max_iter: false,
                    gap,
                    box_iterate: x_a,
                });
            }
            if let Some(bound) = separated(&eig, target, sig, t, &half_omega) {
                return Ok(Feasibility {
                    feasible: false,
                    candidate: None,
                    lower_bound: Some(bound),
                    iterations: k,
                    hit_max_iter: false,
                    gap,
                    box_iterate: x_a,
                });
            }
        }
        history.push(gap);
        if k >= 200 {
            let old = history[k - 101];
            if old - gap < 1e-6 * old {
                return Ok(Feasibility { feasible: false, candidate: None, lower_bound: None, iterations: k, hit_max_iter: false, gap, box_iterate: x_a });
            }
        }
    }
    Ok(Feasibility { feasible: false, candidate: None, lower_bound: None, iterations: opts.max_iter, hit_max_iter: true, gap, box_iterate: x_a })
}

/// Eigen-clip of `Vq + iΩ/2` followed by the identity shift that restores
/// exact physicality. Used as the upper bound for the bisection.
pub fn eigen_clip_baseline(vq: &CovarianceMatrix) -> Result<DMatrix<f64>> {
    let half_omega = symplectic_matrix(vq.n_modes()) * 0.5;
    let (clipped, _) = psd_clip(&hermitian_embedding(vq.data(), &half_omega))?;
    let (a, _) = split_embedding(&clipped);
    Ok(heisenberg_shift(a)?.0)
}

pub fn nearest_physical(
    vq: &CovarianceMatrix,
    sigma: &ErrorMatrix,
    opts: &ProjectionOptions,
) -> Result<ProjectionResult> {
    validate(vq, sigma)?;
    let target = vq.data();
    let sig = sigma.data();
    let basis = vq.basis().clone();
    let finish = |v: DMatrix<f64>, obj: f64, iters: usize, base: f64, converged: bool| -> Result<ProjectionResult> {
        let min_eig = heisenberg_min_eig(&v)?;
        Ok(ProjectionResult {
            v: CovarianceMatrix::from_symmetrized(basis.clone(), v),
            objective: obj,
            iterations: iters,
            constraint_violation: (-min_eig).max(0.0),
            min_eig,
            baseline_objective: base,
            converged,
        })
    };

    let min0 = heisenberg_min_eig(target)?;
    if min0 >= -opts.feas_tol {
        return finish(target.clone(), 0.0, 0, 0.0, true);
    }

    let mut baseline = eigen_clip_baseline(vq)?;
    for (k, &s) in sig.iter().enumerate() {
        if s == 0.0 {
            baseline[k] = target[k];
        }
    }
    let baseline = heisenberg_shift(baseline)?.0;
    let base_obj = objective(target, sig, &baseline, opts.feas_tol);
    let mut iterations = 0;
    let mut converged = true;

    let (mut best, mut best_obj, mut hi) = if base_obj.is_finite() {
        (baseline, base_obj, base_obj)
    } else {
        // Pinned elements moved by the baseline: grow the level until the
        // box meets the cone.
        let unpinned: f64 = target
            .iter()
            .zip(baseline.iter())
            .zip(sig.iter())
            .filter(|(_, s)| **s > 0.0)
            .map(|((a, b), s)| (a - b).abs() / s)
            .fold(0.0, f64::max);
        let mut t = unpinned.max(1e-12);
        let mut found = None;
        for _ in 0..64 {
            let f = feasibility_test(vq, sigma, t, opts)?;
            iterations += f.iterations;
            converged &= !f.hit_max_iter;
            if let Some(c) = f.candidate {
                found = Some((c, t));
                break;
            }
            t *= 2.0;
        }
        let (c, t) = found.ok_or(Error::InfeasiblePinned)?;
        let o = objective(target, sig, &c, opts.feas_tol);
        if !o.is_finite() {
            return Err(Error::InfeasiblePinned);
        }
        (c, o, t)
    };

    let mut lo = 0.0;
    let mut start = target.clone();
    while hi - lo > opts.tol_bisect * hi {
        let mid = 0.5 * (lo + hi);
        let f = feasibility_from(vq, sigma, mid, opts, &start)?;
        start = f.box_iterate;
        iterations += f.iterations;
        converged &= !f.hit_max_iter;
        match f.candidate {
            Some(c) => {
                let o = objective(target, sig, &c, opts.feas_tol);
                if o < best_obj {
                    best_obj = o;
                    best = c;
                }
                hi = mid.min(best_obj);
            }
            None => lo = f.lower_bound.unwrap_or(mid).clamp(mid, hi),
        }
    }
    finish(best, best_obj, iterations, base_obj, converged)
}
