//! Gaussian moment equations of a multi-pump parametric amplifier.
//!
//! Under the rotating-wave approximation a tone at `2 w0 + k Δ` with complex
//! coupling `ε_k` contributes `ε_k a_i† a_j† + h.c.` for every mode pair with
//! `i + j = k` (and `ε_k/2 a_i†² + h.c.` when `i = j = k/2`). With uniform
//! loss `γ` into a vacuum bath the covariance obeys
//! `dV/dt = A V + V A^T + D`, `A = Ω M - γ/2`, `D = γ/2`.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, Schur};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::basis::{quadrature_index, ModeBasis, Quadrature};
use crate::calibration::AmplifierChainCal;
use crate::cluster::PumpConfig;
use crate::covariance::{CovarianceMatrix, QuadratureRecord, VoltageScale};
use crate::error::{Error, Result};
use crate::gaussian::{optimal_pair_analysis, PairSelector};
use crate::linalg::{cholesky_lower, frobenius, min_symmetric_eigenvalue, psd_factor, symplectic_matrix};
use crate::math::{db, sin_cos, sqrt};
use crate::reconstruction::{apply_channel_with, pumpoff_measurement, ChannelModel};
use crate::VACUUM_VARIANCE;

/// Gain defining the pump unit `g_3dB`.
pub const GAIN_3DB: f64 = 1.995_262_314_968_879_5;

const DIVERGENCE_LIMIT: f64 = 1e12;
const LYAPUNOV_RTOL: f64 = 1e-10;
const KRONECKER_MAX_MODES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    pub basis: ModeBasis,
    /// Tone amplitudes are in units of `g_3dB`.
    pub pumps: PumpConfig,
    /// Energy loss rate of every mode (rad/s).
    pub loss_rate: f64,
    /// Coupling `|ε|` (rad/s) per unit of tone amplitude.
    pub pump_scale: f64,
}

impl DynamicsModel {
    pub fn new(basis: ModeBasis, pumps: PumpConfig, loss_rate: f64, pump_scale: f64) -> Result<Self> {
        if !(loss_rate >= 0.0 && loss_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("loss rate must be finite and >= 0, got {loss_rate}")));
        }
        if !(pump_scale > 0.0 && pump_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("pump scale must be positive, got {pump_scale}")));
        }
        Ok(Self { basis, pumps, loss_rate, pump_scale })
    }

    /// Model whose unit amplitude is `g_3dB` at `loss_rate`.
    pub fn calibrated(basis: ModeBasis, pumps: PumpConfig, loss_rate: f64) -> Result<Self> {
        Self::new(basis, pumps, loss_rate, coupling_3db(loss_rate)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftDiffusion {
    pub basis: ModeBasis,
    pub drift: DMatrix<f64>,
    pub diffusion: DMatrix<f64>,
}

/// `M` of `H = 1/2 q^T M q`.
pub fn hamiltonian_matrix(model: &DynamicsModel) -> DMatrix<f64> {
    let basis = &model.basis;
    let mut m = DMatrix::zeros(basis.dim(), basis.dim());
    for tone in model.pumps.tones() {
        let kappa = tone.amplitude * model.pump_scale;
        if kappa == 0.0 {
            continue;
        }
        let (s, c) = sin_cos(tone.phase);
        let (er, ei) = (kappa * c, kappa * s);
        for (pi, &i) in basis.labels().iter().enumerate() {
            let j = tone.offset_units - i;
            if j < i {
                continue;
            }
            let Some(pj) = basis.position(j) else { continue };
            // Same 2x2 block [[εr, εi], [εi, -εr]] in both placements; the
            // degenerate term has half the coupling and appears once.
            let blk = [[er, ei], [ei, -er]];
            for (a, qa) in [Quadrature::X, Quadrature::P].into_iter().enumerate() {
                for (b, qb) in [Quadrature::X, Quadrature::P].into_iter().enumerate() {
                    let (ra, cb) = (quadrature_index(pi, qa), quadrature_index(pj, qb));
                    m[(ra, cb)] += blk[a][b];
                    if pi != pj {
                        m[(cb, ra)] += blk[a][b];
                    }
                }
            }
        }
    }
    m
}

pub fn build_drift_diffusion(model: &DynamicsModel) -> DriftDiffusion {
    let dim = model.basis.dim();
    let half = 0.5 * model.loss_rate;
    let eye = DMatrix::<f64>::identity(dim, dim);
    DriftDiffusion {
        basis: model.basis.clone(),
        drift: symplectic_matrix(model.basis.n_modes()) * hamiltonian_matrix(model) - &eye * half,
        diffusion: eye * (half * 2.0 * VACUUM_VARIANCE),
    }
}

fn rhs(dd: &DriftDiffusion, v: &DMatrix<f64>) -> DMatrix<f64> {
    let av = &dd.drift * v;
    &av + av.transpose() + &dd.diffusion
}

/// Fixed-step RK4 integration of the moment equation from `v0` over
/// `t_final`, with the step shortened so an integer number of steps fits.
pub fn evolve_covariance(dd: &DriftDiffusion, v0: &CovarianceMatrix, t_final: f64, dt: f64) -> Result<CovarianceMatrix> {
    v0.ensure_same_basis(&dd.basis)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    if !(t_final >= 0.0 && t_final.is_finite()) {
        return Err(Error::InvalidArgument(format!("final time must be finite and >= 0, got {t_final}")));
    }
    let steps = crate::math::ceil(t_final / dt - 1e-9).max(0.0) as usize;
    let mut v = v0.data().clone();
    if steps == 0 {
        return Ok(v0.clone());
    }
    let h = t_final / steps as f64;
    for step in 1..=steps {
        let k1 = rhs(dd, &v);
        let k2 = rhs(dd, &(&v + &k1 * (0.5 * h)));
        let k3 = rhs(dd, &(&v + &k2 * (0.5 * h)));
        let k4 = rhs(dd, &(&v + &k3 * h));
        v += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        v = crate::covariance::symmetrize(v);
        if v.iter().any(|x| !x.is_finite() || x.abs() > DIVERGENCE_LIMIT) {
            return Err(Error::Diverged { time: step as f64 * h });
        }
    }
    Ok(CovarianceMatrix::from_symmetrized(dd.basis.clone(), v))
}

/// Largest real part among the eigenvalues of `a`, or `None` when the Schur
/// iteration does not converge.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> Option<f64> {
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 200 * a.nrows().max(1))?;
    Some(schur.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max))
}

fn lyapunov_kronecker(a: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    let eye = DMatrix::<f64>::identity(d, d);
    let k = eye.kronecker(a) + a.kronecker(&eye);
    let b = nalgebra::DVector::from_column_slice(rhs.as_slice());
    let x = k.lu().solve(&(-b)).ok_or(Error::NotPositiveDefinite)?;
    Ok(DMatrix::from_column_slice(d, d, x.as_slice()))
}

/// Matrix-sign iteration for a Hurwitz `a`: `E <- (E + E^-1)/2`,
/// `Q <- (Q + E^-1 Q E^-T)/2`, `X = Q_inf / 2`.
fn lyapunov_sign(a: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    let eye = DMatrix::<f64>::identity(d, d);
    let mut e = a.clone();
    let mut q = rhs.clone();
    for _ in 0..100 {
        let inv = e.clone().try_inverse().ok_or(Error::NotPositiveDefinite)?;
        q = (&q + &inv * &q * inv.transpose()) * 0.5;
        e = (&e + inv) * 0.5;
        if frobenius(&(&e + &eye)) <= 1e-13 * sqrt(d as f64) {
            break;
        }
    }
    Ok(q * 0.5)
}

/// Solves `A X + X A^T + D = 0` for Hurwitz `A`, refining with the residual
/// until it is below `1e-10 ||D||`.
///
/// When the spectrum is unavailable and `D ≻ 0`, a positive-definite solution
/// certifies stability instead (Lyapunov's theorem).
pub fn solve_lyapunov(a: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let abscissa = spectral_abscissa(a);
    match abscissa {
        Some(x) if !(x < 0.0) => return Err(Error::NotHurwitz { max_real_part: x }),
        None if cholesky_lower(d).is_err() => return Err(Error::NotHurwitz { max_real_part: f64::NAN }),
        _ => {}
    }
    let x = solve_refined(a, d)?;
    if abscissa.is_none() && cholesky_lower(&x).is_err() {
        return Err(Error::NotHurwitz { max_real_part: f64::NAN });
    }
    Ok(x)
}

fn solve_refined(a: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let solve = |r: &DMatrix<f64>| {
        if a.nrows() <= 2 * KRONECKER_MAX_MODES {
            lyapunov_kronecker(a, r)
        } else {
            lyapunov_sign(a, r)
        }
    };
    let bound = LYAPUNOV_RTOL * frobenius(d);
    let mut x = crate::covariance::symmetrize(solve(d)?);
    let mut residual = f64::INFINITY;
    for _ in 0..4 {
        let ax = a * &x;
        let r = &ax + ax.transpose() + d;
        residual = frobenius(&r);
        if residual <= bound {
            return Ok(x);
        }
        x += solve(&r)?;
        x = crate::covariance::symmetrize(x);
    }
    Err(Error::LyapunovResidual { residual })
}

pub fn steady_state(dd: &DriftDiffusion) -> Result<CovarianceMatrix> {
    Ok(CovarianceMatrix::from_symmetrized(dd.basis.clone(), solve_lyapunov(&dd.drift, &dd.diffusion)?))
}

/// Zero-frequency power gain `1/2 ||S_ii||_F^2` of mode `label`, with the
/// input-output scattering matrix `S = I + γ A^-1`.
pub fn phase_preserving_gain(model: &DynamicsModel, label: i32) -> Result<f64> {
    if !(model.loss_rate > 0.0) {
        return Err(Error::InvalidArgument("gain needs a positive loss rate".into()));
    }
    let dd = build_drift_diffusion(model);
    // Stability check; the solution itself is not needed.
    solve_lyapunov(&dd.drift, &dd.diffusion)?;
    let inv = dd.drift.clone().try_inverse().ok_or(Error::NotHurwitz { max_real_part: 0.0 })?;
    let p = model.basis.position_of(label)?;
    let (x, pp) = (quadrature_index(p, Quadrature::X), quadrature_index(p, Quadrature::P));
    let mut sum = 0.0;
    for &r in &[x, pp] {
        for &c in &[x, pp] {
            let delta = if r == c { 1.0 } else { 0.0 };
            let s = delta + model.loss_rate * inv[(r, c)];
            sum += s * s;
        }
    }
    Ok(0.5 * sum)
}

/// Coupling `|ε|` (rad/s) at which a single pump on the pair `(-1, 1)` gives
/// 3 dB of phase-preserving gain, found by bisection.
pub fn coupling_3db(loss_rate: f64) -> Result<f64> {
    if !(loss_rate > 0.0 && loss_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!("g_3dB needs a positive loss rate, got {loss_rate}")));
    }
    let basis = ModeBasis::new(10.0, 1.0, alloc::vec![-1, 1])?;
    let gain = |kappa: f64| -> Result<f64> {
        let m = DynamicsModel::new(basis.clone(), PumpConfig::single(1.0, 0.0), loss_rate, kappa)?;
        phase_preserving_gain(&m, 1)
    };
    let (mut lo, mut hi) = (0.0, 0.5 * loss_rate);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        match gain(mid) {
            Ok(g) if g < GAIN_3DB => lo = mid,
            _ => hi = mid,
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    /// Pair whose `p_i`, `x_j` covariance is analyzed.
    pub pair: (i32, i32),
    /// Evolution time used when `γ = 0` (no steady state).
    pub t_final: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub g: f64,
    pub gamma: f64,
    /// Squeezed eigenvalue at the optimal rotation relative to pump-off (dB).
    pub db_min: f64,
    /// Anti-squeezed eigenvalue at the same rotation relative to pump-off (dB).
    pub db_max: f64,
    pub theta: f64,
    /// Above threshold: no steady state or divergent evolution.
    pub flagged: bool,
}

fn pair_state(model: &DynamicsModel, opts: &SweepOptions) -> Result<CovarianceMatrix> {
    let dd = build_drift_diffusion(model);
    if model.loss_rate > 0.0 {
        steady_state(&dd)
    } else {
        evolve_covariance(&dd, &CovarianceMatrix::vacuum(model.basis.clone()), opts.t_final, opts.dt)
    }
}

/// One grid point: the template with every amplitude scaled by `g` and loss
/// rate `gamma`. Above-threshold points come back flagged with NaN values.
pub fn sweep_point(template: &DynamicsModel, g: f64, gamma: f64, opts: &SweepOptions) -> Result<SweepRow> {
    let on = DynamicsModel::new(template.basis.clone(), template.pumps.scaled(g)?, gamma, template.pump_scale)?;
    let off = DynamicsModel { pumps: template.pumps.scaled(0.0)?, ..on.clone() };
    let (i, j) = opts.pair;
    let flagged = SweepRow { g, gamma, db_min: f64::NAN, db_max: f64::NAN, theta: f64::NAN, flagged: true };
    let v_on = match pair_state(&on, opts) {
        Ok(v) => v,
        Err(Error::NotHurwitz { .. } | Error::Diverged { .. }) => return Ok(flagged),
        Err(e) => return Err(e),
    };
    let v_off = pair_state(&off, opts)?;
    let (theta, e_on) = optimal_pair_analysis(&v_on, i, j, PairSelector::Px)?;
    let (_, e_off) = optimal_pair_analysis(&v_off, i, j, PairSelector::Px)?;
    Ok(SweepRow {
        g,
        gamma,
        db_min: db(e_on.smaller / e_off.smaller),
        db_max: db(e_on.larger / e_off.larger),
        theta,
        flagged: false,
    })
}

/// Row-major over `gamma_values`, then `g_values`.
pub fn sweep_squeezing(
    template: &DynamicsModel,
    g_values: &[f64],
    gamma_values: &[f64],
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    if g_values.is_empty() || gamma_values.is_empty() {
        return Err(Error::InvalidArgument("sweep grids must be non-empty".into()));
    }
    let mut rows = Vec::with_capacity(g_values.len() * gamma_values.len());
    for &gamma in gamma_values {
        for &g in g_values {
            rows.push(sweep_point(template, g, gamma, opts)?);
        }
    }
    Ok(rows)
}

/// Seeded generator of pump-on and pump-off voltage records.
///
/// Pump-on samples have photon-unit covariance `T V T + N` and pump-off
/// samples `G (nbar + 1)` on the diagonal, both under
/// [`ChannelModel::ClassicalAdded`], scaled to volts by
/// `sqrt(Z hbar Delta w)`. Rows are drawn one at a time from independent
/// ChaCha8 streams, so the output does not depend on chunk sizes.
#[derive(Debug, Clone)]
pub struct MeasurementSynth {
    basis: ModeBasis,
    factor_on: DMatrix<f64>,
    factor_off: DMatrix<f64>,
    rng_on: ChaCha8Rng,
    rng_off: ChaCha8Rng,
}

impl MeasurementSynth {
    pub fn new(vq: &CovarianceMatrix, cal: &AmplifierChainCal, scale: VoltageScale, seed: u64) -> Result<Self> {
        let d = vq.data();
        let tol = 1e-12 * d.amax().max(1.0);
        if min_symmetric_eigenvalue(d)? < -tol {
            return Err(Error::NotPositiveDefinite);
        }
        let basis = vq.basis().clone();
        let s = scale.amplitude_scales(&basis);
        let volts = |m: &CovarianceMatrix| -> Result<DMatrix<f64>> {
            let mut f = psd_factor(m.data(), 1e-12)?;
            for (r, mut row) in f.row_iter_mut().enumerate() {
                row *= s[r];
            }
            Ok(f)
        };
        let factor_on = volts(&apply_channel_with(vq, cal, ChannelModel::ClassicalAdded)?)?;
        let factor_off = volts(&pumpoff_measurement(&basis, cal)?)?;
        let rng_on = ChaCha8Rng::seed_from_u64(seed);
        let mut rng_off = ChaCha8Rng::seed_from_u64(seed);
        rng_off.set_stream(1);
        Ok(Self { basis, factor_on, factor_off, rng_on, rng_off })
    }

    pub fn basis(&self) -> &ModeBasis {
        &self.basis
    }

    fn draw(rng: &mut ChaCha8Rng, factor: &DMatrix<f64>, rows: usize) -> DMatrix<f64> {
        let d = factor.nrows();
        let mut z = DMatrix::<f64>::zeros(rows, d);
        for r in 0..rows {
            for c in 0..d {
                z[(r, c)] = StandardNormal.sample(rng);
            }
        }
        z * factor.transpose()
    }

    /// Next `rows` pump-on samples (volts), one per row.
    pub fn pump_on(&mut self, rows: usize) -> DMatrix<f64> {
        Self::draw(&mut self.rng_on, &self.factor_on, rows)
    }

    /// Next `rows` pump-off samples (volts), one per row.
    pub fn pump_off(&mut self, rows: usize) -> DMatrix<f64> {
        Self::draw(&mut self.rng_off, &self.factor_off, rows)
    }
}

/// Pump-on and pump-off records of `n_samples` rows each.
pub fn synthesize_measurement(
    vq: &CovarianceMatrix,
    cal: &AmplifierChainCal,
    scale: VoltageScale,
    n_samples: usize,
    seed: u64,
) -> Result<(QuadratureRecord, QuadratureRecord)> {
    if n_samples < 2 {
        return Err(Error::TooFewSamples(n_samples));
    }
    let mut synth = MeasurementSynth::new(vq, cal, scale, seed)?;
    let on = synth.pump_on(n_samples);
    let off = synth.pump_off(n_samples);
    Ok((QuadratureRecord::new(synth.basis.clone(), on)?, QuadratureRecord::new(synth.basis, off)?))
}

/// Analytic two-mode gain `((1 + x^2) / (1 - x^2))^2` with `x = 2κ/γ`.
#[cfg(test)]
fn two_mode_gain(kappa: f64, gamma: f64) -> f64 {
    let x2 = (2.0 * kappa / gamma).powi(2);
    ((1.0 + x2) / (1.0 - x2)).powi(2)
}
