//! The amplification chain as a noisy Gaussian channel: forward model,
//! inversion, and error propagation.
//!
//! Gains enter element-wise as `sqrt(G_a G_b)`, i.e. `T V T` with
//! `T = ⊕ sqrt(G_i) I_2`, which keeps every map symmetric.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::basis::ModeBasis;
use crate::calibration::{AmplifierChainCal, CalRecord};
use crate::covariance::CovarianceMatrix;
use crate::error::{Error, Result};
use crate::math::sqrt;

/// How much classical noise the chain adds on the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChannelModel {
    /// Phase-insensitive bosonic amplifier: `N = (G - 1)(nbar + 1/2)`.
    #[default]
    Bosonic,
    /// Classical added noise referred to the input: `N = G (nbar + 1/2)`.
    /// This is the model under which the pump-off inversion is exact.
    ClassicalAdded,
}

impl ChannelModel {
    pub fn noise(self, gain: f64, nbar: f64) -> f64 {
        match self {
            ChannelModel::Bosonic => (gain - 1.0) * (nbar + 0.5),
            ChannelModel::ClassicalAdded => gain * (nbar + 0.5),
        }
    }
}

/// Per-quadrature diagonals of the transmission `T` and noise `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrices {
    pub t: DVector<f64>,
    pub n: DVector<f64>,
}

impl ChannelMatrices {
    pub fn new(basis: &ModeBasis, cal: &AmplifierChainCal, model: ChannelModel) -> Result<Self> {
        let recs = cal.for_basis(basis)?;
        let dim = basis.dim();
        Ok(Self {
            t: DVector::from_fn(dim, |k, _| sqrt(recs[k / 2].gain)),
            n: DVector::from_fn(dim, |k, _| model.noise(recs[k / 2].gain, recs[k / 2].nbar)),
        })
    }
}

/// Symmetric matrix of 1σ element uncertainties.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMatrix {
    basis: ModeBasis,
    data: DMatrix<f64>,
}

impl ErrorMatrix {
    pub fn new(basis: ModeBasis, data: DMatrix<f64>) -> Result<Self> {
        let dim = basis.dim();
        if data.shape() != (dim, dim) {
            return Err(Error::DimensionMismatch { expected: dim, found: data.nrows() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        if data.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidArgument("uncertainties must be non-negative".into()));
        }
        let asym = (&data - data.transpose()).amax();
        if asym > crate::covariance::SYMMETRY_TOLERANCE * data.amax().max(f64::MIN_POSITIVE) {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        Ok(Self { basis, data: crate::covariance::symmetrize(data) })
    }

    pub fn zeros(basis: ModeBasis) -> Self {
        let dim = basis.dim();
        Self { basis, data: DMatrix::zeros(dim, dim) }
    }

    pub fn uniform(basis: ModeBasis, sigma: f64) -> Result<Self> {
        let dim = basis.dim();
        Self::new(basis, DMatrix::from_element(dim, dim, sigma))
    }

    pub fn basis(&self) -> &ModeBasis {
        &self.basis
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Standard error of each sample-covariance element from `n_samples`
    /// Gaussian draws: `sqrt((V_aa V_bb + V_ab^2) / n)`.
    pub fn sample_standard_error(v: &CovarianceMatrix, n_samples: usize) -> Result<Self> {
        if n_samples < 2 {
            return Err(Error::TooFewSamples(n_samples));
        }
        let d = v.data();
        let n = n_samples as f64;
        let data = DMatrix::from_fn(d.nrows(), d.ncols(), |a, b| {
            sqrt(((d[(a, a)] * d[(b, b)]).max(0.0) + d[(a, b)] * d[(a, b)]) / n)
        });
        Self::new(v.basis().clone(), data)
    }
}

/// `T V T + N` under the bosonic channel model.
pub fn apply_channel(vq: &CovarianceMatrix, cal: &AmplifierChainCal) -> Result<CovarianceMatrix> {
    apply_channel_with(vq, cal, ChannelModel::Bosonic)
}

pub fn apply_channel_with(
    vq: &CovarianceMatrix,
    cal: &AmplifierChainCal,
    model: ChannelModel,
) -> Result<CovarianceMatrix> {
    let ch = ChannelMatrices::new(vq.basis(), cal, model)?;
    let d = vq.data();
    let mut out = DMatrix::from_fn(d.nrows(), d.ncols(), |a, b| ch.t[a] * ch.t[b] * d[(a, b)]);
    for k in 0..out.nrows() {
        out[(k, k)] += ch.n[k];
    }
    Ok(CovarianceMatrix::from_symmetrized(vq.basis().clone(), out))
}

/// Pump-off measurement predicted for a vacuum input: `G (nbar + 1) I`.
pub fn pumpoff_measurement(basis: &ModeBasis, cal: &AmplifierChainCal) -> Result<CovarianceMatrix> {
    apply_channel_with(&CovarianceMatrix::vacuum(basis.clone()), cal, ChannelModel::ClassicalAdded)
}

fn pumpoff_quantum_data(vm0: &DMatrix<f64>, recs: &[CalRecord]) -> DMatrix<f64> {
    DMatrix::from_fn(vm0.nrows(), vm0.ncols(), |a, b| {
        let (ra, rb) = (&recs[a / 2], &recs[b / 2]);
        if a == b {
            vm0[(a, a)] / (ra.gain * (2.0 * ra.nbar + 2.0))
        } else {
            vm0[(a, b)] / sqrt(ra.gain * rb.gain)
        }
    })
}

/// Quantum covariance without pumps from its measured counterpart.
pub fn recover_pumpoff_quantum(vmeas0: &CovarianceMatrix, cal: &AmplifierChainCal) -> Result<CovarianceMatrix> {
    let recs = cal.for_basis(vmeas0.basis())?;
    Ok(CovarianceMatrix::from_symmetrized(vmeas0.basis().clone(), pumpoff_quantum_data(vmeas0.data(), &recs)))
}

/// `V_q = T^{-1} (V_m - V_m0) T^{-1} + V_q0`, symmetrized.
pub fn recover_quantum(
    vmeas: &CovarianceMatrix,
    vmeas0: &CovarianceMatrix,
    cal: &AmplifierChainCal,
) -> Result<CovarianceMatrix> {
    vmeas0.ensure_same_basis(vmeas.basis())?;
    let recs = cal.for_basis(vmeas.basis())?;
    let vq0 = pumpoff_quantum_data(vmeas0.data(), &recs);
    let (m, m0) = (vmeas.data(), vmeas0.data());
    let out = DMatrix::from_fn(m.nrows(), m.ncols(), |a, b| {
        (m[(a, b)] - m0[(a, b)]) / sqrt(recs[a / 2].gain * recs[b / 2].gain) + vq0[(a, b)]
    });
    Ok(CovarianceMatrix::from_symmetrized(vmeas.basis().clone(), out))
}

/// Error-propagation formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PropagationRule {
    /// First-order propagation through the exact recovery map, including the
    /// gains of both modes of an off-diagonal element and the gain/noise
    /// covariance with its correct sign.
    #[default]
    Linearized,
    /// The closed-form row-gain expressions: only `G` of the row mode enters,
    /// pump-off terms are added independently, and the gain/noise covariance
    /// is subtracted.
    RowGain,
}

/// Propagated uncertainties and the elements whose row-gain-rule radicand
/// was negative (those fall back to dropping the covariance term).
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedErrors {
    pub sigma: ErrorMatrix,
    pub flagged: Vec<(usize, usize)>,
}

pub fn propagate_errors(
    vmeas: &CovarianceMatrix,
    vmeas0: &CovarianceMatrix,
    cal: &AmplifierChainCal,
    sigma_meas: &ErrorMatrix,
    sigma_meas0: &ErrorMatrix,
    rule: PropagationRule,
) -> Result<PropagatedErrors> {
    let basis = vmeas.basis();
    vmeas0.ensure_same_basis(basis)?;
    if sigma_meas.basis() != basis || sigma_meas0.basis() != basis {
        return Err(Error::BasisMismatch);
    }
    let recs = cal.for_basis(basis)?;
    let (m, m0) = (vmeas.data(), vmeas0.data());
    let (sm, sm0) = (sigma_meas.data(), sigma_meas0.data());
    let dim = basis.dim();
    let mut var = DMatrix::zeros(dim, dim);
    let mut flagged = Vec::new();

    for a in 0..dim {
        for b in 0..dim {
            let (ra, rb) = (&recs[a / 2], &recs[b / 2]);
            let v = match rule {
                PropagationRule::Linearized => {
                    linearized_variance(a, b, m[(a, b)], m0[(a, b)], sm[(a, b)], sm0[(a, b)], ra, rb)
                }
                PropagationRule::RowGain => {
                    let (v, bad) = row_gain_variance(a == b, m[(a, b)], m0[(a, b)], sm[(a, b)], sm0[(a, b)], ra);
                    if bad {
                        flagged.push((a, b));
                    }
                    v
                }
            };
            var[(a, b)] = v;
        }
    }
    // The row-gain rule is row-asymmetric; average the two orientations.
    let sigma = DMatrix::from_fn(dim, dim, |a, b| {
        if a == b {
            sqrt(var[(a, a)])
        } else {
            0.5 * (sqrt(var[(a, b)]) + sqrt(var[(b, a)]))
        }
    });
    Ok(PropagatedErrors { sigma: ErrorMatrix::new(basis.clone(), sigma)?, flagged })
}

#[allow(clippy::too_many_arguments)]
fn linearized_variance(
    a: usize,
    b: usize,
    m: f64,
    m0: f64,
    sm: f64,
    sm0: f64,
    ra: &CalRecord,
    rb: &CalRecord,
) -> f64 {
    if a == b {
        let (g, n) = (ra.gain, ra.nbar);
        let vq = (m - m0) / g + m0 / (g * (2.0 * n + 2.0));
        let d_g = -vq / g;
        let d_n = -m0 / (2.0 * g * (n + 1.0) * (n + 1.0));
        let d_m = 1.0 / g;
        let d_m0 = -(1.0 / g) * (1.0 - 1.0 / (2.0 * n + 2.0));
        let v = d_g * d_g * ra.sigma_gain * ra.sigma_gain
            + d_n * d_n * ra.sigma_nbar * ra.sigma_nbar
            + 2.0 * d_g * d_n * ra.cov_gain_nbar
            + d_m * d_m * sm * sm
            + d_m0 * d_m0 * sm0 * sm0;
        return v.max(0.0);
    }
    // Off the diagonal the pump-off term cancels: V_q = V_m / sqrt(G_a G_b).
    let root = sqrt(ra.gain * rb.gain);
    let vq = m / root;
    let meas = sm * sm / (ra.gain * rb.gain);
    if a / 2 == b / 2 {
        let d_g = -vq / ra.gain;
        meas + d_g * d_g * ra.sigma_gain * ra.sigma_gain
    } else {
        let d_ga = -vq / (2.0 * ra.gain);
        let d_gb = -vq / (2.0 * rb.gain);
        meas + d_ga * d_ga * ra.sigma_gain * ra.sigma_gain + d_gb * d_gb * rb.sigma_gain * rb.sigma_gain
    }
}

fn row_gain_variance(diagonal: bool, m: f64, m0: f64, sm: f64, sm0: f64, r: &CalRecord) -> (f64, bool) {
    let (g, n) = (r.gain, r.nbar);
    let sg2 = r.sigma_gain * r.sigma_gain;
    let q0 = if diagonal {
        let t_g = m0 / (g * g * (2.0 * n + 2.0));
        let t_n = m0 / (2.0 * g * (n + 1.0) * (n + 1.0));
        let t_m0 = 1.0 / (g * (2.0 * n + 2.0));
        let base = t_g * t_g * sg2 + t_n * t_n * r.sigma_nbar * r.sigma_nbar + t_m0 * t_m0 * sm0 * sm0;
        let cross = m0 * m0 * r.cov_gain_nbar / (2.0 * g * g * g * (n + 1.0) * (n + 1.0) * (n + 1.0));
        (base, base - cross)
    } else {
        let t_g = m0 / (g * g);
        let base = t_g * t_g * sg2 + sm0 * sm0 / (g * g);
        (base, base)
    };
    let (q0_safe, q0_full) = q0;
    let t_g = (m - m0) / (g * g);
    let outer = t_g * t_g * sg2 + (sm * sm + sm0 * sm0) / (g * g);
    if q0_full < 0.0 {
        (outer + q0_safe, true)
    } else {
        (outer + q0_full, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::two_mode_squeezed_vacuum;
    use core::f64::consts::TAU;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis() -> ModeBasis {
        ModeBasis::symmetric(TAU * 4.2e9, TAU * 1e5, 1).unwrap()
    }

    fn cal_with(b: &ModeBasis, f: impl Fn(usize) -> (f64, f64)) -> AmplifierChainCal {
        AmplifierChainCal::new(
            b.labels()
                .iter()
                .enumerate()
                .map(|(k, &l)| {
                    let (g, n) = f(k);
                    CalRecord::exact(b.frequency(l) / TAU, g, n)
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_channel() {
        let b = basis();
        let v = two_mode_squeezed_vacuum(b.clone(), -1, 1, 0.4).unwrap();
        let out = apply_channel(&v, &AmplifierChainCal::uniform(&b, 1.0, 0.0).unwrap()).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn vacuum_through_gain_four() {
        let b = basis();
        let out = apply_channel(&CovarianceMatrix::vacuum(b.clone()), &AmplifierChainCal::uniform(&b, 4.0, 0.0).unwrap()).unwrap();
        for k in 0..b.dim() {
            assert_eq!(out.data()[(k, k)], 3.5);
        }
    }

    #[test]
    fn off_diagonal_scales_by_root_gain_product() {
        let b = basis();
        let v = two_mode_squeezed_vacuum(b.clone(), -1, 1, 0.4).unwrap();
        let gains = [2.0, 5.0, 11.0];
        let cal = cal_with(&b, |k| (gains[k], 1.5));
        let out = apply_channel(&v, &cal).unwrap();
        for a in 0..6 {
            for c in 0..6 {
                let want = if a == c {
                    gains[a / 2] * v.data()[(a, a)] + (gains[a / 2] - 1.0) * 2.0
                } else {
                    sqrt(gains[a / 2] * gains[c / 2]) * v.data()[(a, c)]
                };
                assert!((out.data()[(a, c)] - want).abs() < 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn pumpoff_recovery_anchors() {
        let b = basis();
        let unit = AmplifierChainCal::uniform(&b, 1.0, 0.0).unwrap();
        let m0 = pumpoff_measurement(&b, &unit).unwrap();
        assert!((m0.data()[(0, 0)] - 1.0).abs() < 1e-15);
        let q0 = recover_pumpoff_quantum(&m0, &unit).unwrap();
        assert!(q0.max_abs_diff(&CovarianceMatrix::vacuum(b.clone())) < 1e-15);

        let cal = AmplifierChainCal::uniform(&b, 100.0, 10.0).unwrap();
        let m0 = pumpoff_measurement(&b, &cal).unwrap();
        assert!((m0.data()[(2, 2)] - 1100.0).abs() < 1e-10);
        let q0 = recover_pumpoff_quantum(&m0, &cal).unwrap();
        assert!((q0.data()[(2, 2)] - 0.5).abs() < 1e-14);
        assert_eq!(q0.data()[(0, 3)], 0.0);
    }

    #[test]
    fn pumpoff_identity_and_common_noise() {
        let b = basis();
        let cal = cal_with(&b, |k| (50.0 + k as f64, 2.0 + k as f64));
        let m0 = pumpoff_measurement(&b, &cal).unwrap();
        let q = recover_quantum(&m0, &m0, &cal).unwrap();
        assert!(q.max_abs_diff(&recover_pumpoff_quantum(&m0, &cal).unwrap()) < 1e-15);

        // Common diagonal noise drops out of the difference term and reaches
        // the result only through the pump-off reference, attenuated by
        // G (2 nbar + 2).
        let v = two_mode_squeezed_vacuum(b.clone(), -1, 1, 0.7).unwrap();
        let m = apply_channel_with(&v, &cal, ChannelModel::ClassicalAdded).unwrap();
        let extra = 3.25;
        let bump = DMatrix::identity(6, 6) * extra;
        let m_x = CovarianceMatrix::new(b.clone(), m.data() + &bump).unwrap();
        let m0_x = CovarianceMatrix::new(b.clone(), m0.data() + &bump).unwrap();
        let q1 = recover_quantum(&m, &m0, &cal).unwrap();
        let q2 = recover_quantum(&m_x, &m0_x, &cal).unwrap();
        let recs = cal.for_basis(&b).unwrap();
        for a in 0..6 {
            for c in 0..6 {
                let r = &recs[a / 2];
                let want = if a == c { extra / (r.gain * (2.0 * r.nbar + 2.0)) } else { 0.0 };
                assert!((q2.data()[(a, c)] - q1.data()[(a, c)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn closed_loop_round_trip() {
        let b = basis();
        let cal = cal_with(&b, |k| (80.0 * (k + 1) as f64, 3.0 + 0.5 * k as f64));
        let v = two_mode_squeezed_vacuum(b.clone(), -1, 1, 0.9).unwrap();
        let m = apply_channel_with(&v, &cal, ChannelModel::ClassicalAdded).unwrap();
        let m0 = pumpoff_measurement(&b, &cal).unwrap();
        let q = recover_quantum(&m, &m0, &cal).unwrap();
        assert!(q.max_abs_diff(&v) < 1e-10);
    }

    #[test]
    fn basis_mismatch_and_missing_cal() {
        let b = basis();
        let other = ModeBasis::symmetric(TAU * 4.2e9, TAU * 1e5, 2).unwrap();
        let cal = AmplifierChainCal::uniform(&b, 10.0, 1.0).unwrap();
        let m = CovarianceMatrix::vacuum(b.clone());
        let m_other = CovarianceMatrix::vacuum(other.clone());
        assert_eq!(recover_quantum(&m, &m_other, &cal), Err(Error::BasisMismatch));
        assert!(matches!(apply_channel(&m_other, &cal), Err(Error::MissingCalibration { .. })));
    }

    fn noisy_cal(b: &ModeBasis) -> AmplifierChainCal {
        AmplifierChainCal::new(
            b.labels()
                .iter()
                .enumerate()
                .map(|(k, &l)| CalRecord {
                    frequency_hz: b.frequency(l) / TAU,
                    gain: 100.0 + 10.0 * k as f64,
                    nbar: 4.0 + k as f64,
                    sigma_gain: 1.0,
                    sigma_nbar: 0.08,
                    cov_gain_nbar: 0.05,
                    nbar_clamped: false,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_inputs_give_zero_sigma() {
        let b = basis();
        let cal = AmplifierChainCal::uniform(&b, 30.0, 2.0).unwrap();
        let v = two_mode_squeezed_vacuum(b.clone(), -1, 1, 0.5).unwrap();
        let m = apply_channel(&v, &cal).unwrap();
        let m0 = pumpoff_measurement(&b, &cal).unwrap();
        let z = ErrorMatrix::zeros(b.clone());
        for rule in [PropagationRule::Linearized, PropagationRule::RowGain] {
            let e = propagate_errors(&m, &m0, &cal, &z, &z, rule).unwrap();
            assert_eq!(e.sigma.data().amax(), 0.0);
        }
    }

    #[test]
    fn unit_gain_collapse_of_row_gain_rule() {
        let b = basis();
        let cal = AmplifierChainCal::uniform(&b, 1.0, 0.0).unwrap();
        let v = two_mode_squeezed_vacuum(b.clone(), -1, 1, 0.5).unwrap();
        let m = apply_channel(&v, &cal).unwrap();
        let m0 = pumpoff_measurement(&b, &cal).unwrap();
        let sm = ErrorMatrix::uniform(b.clone(), 0.03).unwrap();
        let sm0 = ErrorMatrix::uniform(b.clone(), 0.02).unwrap();
        let e = propagate_errors(&m, &m0, &cal, &sm, &sm0, PropagationRule::RowGain).unwrap();
        // With G = 1, nbar = 0: sigma_q0 on the diagonal is sm0 / 2 and off
        // the diagonal sm0.
        let diag = sqrt(0.03f64 * 0.03 + 0.02 * 0.02 + 0.01 * 0.01);
        let off = sqrt(0.03f64 * 0.03 + 0.02 * 0.02 + 0.02 * 0.02);
        assert!((e.sigma.data()[(0, 0)] - diag).abs() < 1e-15);
        assert!((e.sigma.data()[(0, 3)] - off).abs() < 1e-15);
    }

    #[test]
    fn row_gain_radicand_stays_non_negative_at_full_correlation() {
        // With |cov| <= sigma_G sigma_nbar the row-gain pump-off radicand is
        // a perfect square plus positive terms, so nothing is flagged.
        let b = ModeBasis::new(TAU * 4.2e9, TAU * 1e5, alloc::vec![0]).unwrap();
        let (g, n, sg, sn) = (2.0, 0.5, 0.3, 0.2);
        let cal = AmplifierChainCal::new(alloc::vec![CalRecord {
            frequency_hz: 4.2e9,
            gain: g,
            nbar: n,
            sigma_gain: sg,
            sigma_nbar: sn,
            cov_gain_nbar: sg * sn,
            nbar_clamped: false,
        }])
        .unwrap();
        let m0 = CovarianceMatrix::new(b.clone(), DMatrix::identity(2, 2) * 10.0).unwrap();
        let z = ErrorMatrix::zeros(b.clone());
        let e = propagate_errors(&m0, &m0, &cal, &z, &z, PropagationRule::RowGain).unwrap();
        assert!(e.flagged.is_empty());
        let tg = 10.0 / (g * g * (2.0 * n + 2.0));
        let tn = 10.0 / (2.0 * g * (n + 1.0) * (n + 1.0));
        let want = (tg * sg - tn * sn).abs();
        assert!((e.sigma.data()[(0, 0)] - want).abs() < 1e-14);
    }

    // Monte Carlo over calibration and measurement noise, 4000 draws.
    #[test]
    fn linearized_rule_matches_monte_carlo() {
        let b = basis();
        let cal = noisy_cal(&b);
        let v = two_mode_squeezed_vacuum(b.clone(), -1, 1, 0.6).unwrap();
        let m = apply_channel_with(&v, &cal, ChannelModel::ClassicalAdded).unwrap();
        let m0 = pumpoff_measurement(&b, &cal).unwrap();
        let sm = ErrorMatrix::sample_standard_error(&m, 20_000).unwrap();
        let sm0 = ErrorMatrix::sample_standard_error(&m0, 20_000).unwrap();
        let pred = propagate_errors(&m, &m0, &cal, &sm, &sm0, PropagationRule::Linearized).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(rand_distr::StandardNormal) };
        let trials = 4000;
        let dim = b.dim();
        let mut sum = DMatrix::<f64>::zeros(dim, dim);
        let mut sum2 = DMatrix::<f64>::zeros(dim, dim);
        for _ in 0..trials {
            let recs: Vec<CalRecord> = cal
                .records()
                .iter()
                .map(|r| {
                    let (z1, z2) = (normal(&mut rng), normal(&mut rng));
                    let rho = r.cov_gain_nbar / (r.sigma_gain * r.sigma_nbar);
                    CalRecord {
                        gain: r.gain + r.sigma_gain * z1,
                        nbar: r.nbar + r.sigma_nbar * (rho * z1 + sqrt(1.0 - rho * rho) * z2),
                        ..*r
                    }
                })
                .collect();
            let c = AmplifierChainCal::new(recs).unwrap();
            let mut pm = m.data().clone();
            let mut pm0 = m0.data().clone();
            for a in 0..dim {
                for k in a..dim {
                    let (d, d0) = (sm.data()[(a, k)] * normal(&mut rng), sm0.data()[(a, k)] * normal(&mut rng));
                    pm[(a, k)] += d;
                    pm0[(a, k)] += d0;
                    if a != k {
                        pm[(k, a)] += d;
                        pm0[(k, a)] += d0;
                    }
                }
            }
            let q = recover_quantum(
                &CovarianceMatrix::new(b.clone(), pm).unwrap(),
                &CovarianceMatrix::new(b.clone(), pm0).unwrap(),
                &c,
            )
            .unwrap();
            sum += q.data();
            sum2 += q.data().component_mul(q.data());
        }
        let n = trials as f64;
        for a in 0..dim {
            for k in 0..dim {
                let mean = sum[(a, k)] / n;
                let sd = sqrt((sum2[(a, k)] / n - mean * mean) * n / (n - 1.0));
                let p = pred.sigma.data()[(a, k)];
                assert!((sd / p - 1.0).abs() < 0.1, "({a},{k}): mc {sd} vs {p}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn recovery_is_linear_in_the_difference(seed in 0u64..1000, s in -3.0f64..3.0) {
            let b = basis();
            let cal = noisy_cal(&b);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = {
                let g = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
                (&g + g.transpose()) * 0.5
            };
            let m0 = pumpoff_measurement(&b, &cal).unwrap();
            let q0 = recover_quantum(&m0, &m0, &cal).unwrap();
            let m1 = CovarianceMatrix::new(b.clone(), m0.data() + &d).unwrap();
            let ms = CovarianceMatrix::new(b.clone(), m0.data() + &d * s).unwrap();
            let q1 = recover_quantum(&m1, &m0, &cal).unwrap();
            let qs = recover_quantum(&ms, &m0, &cal).unwrap();
            let lhs = qs.data() - q0.data();
            let rhs = (q1.data() - q0.data()) * s;
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }

        #[test]
        fn sigma_monotone_in_inputs(which in 0usize..4, bump in 0.0f64..2.0, rule_row_gain in proptest::bool::ANY) {
            let b = basis();
            let base = noisy_cal(&b);
            let v = two_mode_squeezed_vacuum(b.clone(), -1, 1, 0.5).unwrap();
            let m = apply_channel_with(&v, &base, ChannelModel::ClassicalAdded).unwrap();
            let m0 = pumpoff_measurement(&b, &base).unwrap();
            let sm = ErrorMatrix::sample_standard_error(&m, 10_000).unwrap();
            let sm0 = ErrorMatrix::sample_standard_error(&m0, 10_000).unwrap();
            let rule = if rule_row_gain { PropagationRule::RowGain } else { PropagationRule::Linearized };
            let before = propagate_errors(&m, &m0, &base, &sm, &sm0, rule).unwrap();
            let scale = 1.0 + bump;
            let (mut cal2, mut sm2, mut sm02) = (base.clone(), sm.clone(), sm0.clone());
            match which {
                0 => sm2 = ErrorMatrix::new(b.clone(), sm.data() * scale).unwrap(),
                1 => sm02 = ErrorMatrix::new(b.clone(), sm0.data() * scale).unwrap(),
                // The gain/noise covariance is held fixed; it stays within the
                // Cauchy-Schwarz bound as the sigmas grow.
                _ => {
                    let recs = base.records().iter().map(|r| {
                        let (sg, sn) = if which == 2 { (scale, 1.0) } else { (1.0, scale) };
                        CalRecord { sigma_gain: r.sigma_gain * sg, sigma_nbar: r.sigma_nbar * sn, ..*r }
                    }).collect();
                    cal2 = AmplifierChainCal::new(recs).unwrap();
                }
            }
            let after = propagate_errors(&m, &m0, &cal2, &sm2, &sm02, rule).unwrap();
            let diff = after.sigma.data() - before.sigma.data();
            prop_assert!(diff.min() >= -1e-15 * before.sigma.data().amax());
        }
    }
}
