//! Gain and added-noise calibration from temperature-swept Johnson noise.
//!
//! The amplified noise spectral density
//! `P = G h f [coth(hf / 2kT) + 2 nbar + 1] / 2` is affine in the pair
//! `a = G`, `b = G (2 nbar + 1)`, so the fit is a two-parameter linear least
//! squares per frequency followed by the delta method for `nbar`.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::basis::ModeBasis;
use crate::error::{Error, Result};
use crate::math::{sqrt, tanh};
use crate::{BOLTZMANN, PLANCK};

/// Relative frequency tolerance when matching a mode to a calibration row.
pub const FREQUENCY_MATCH_RTOL: f64 = 1e-9;

/// Temperature-swept voltage-noise variances.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSweep {
    frequencies: Vec<f64>,
    temperatures: Vec<f64>,
    variances: DMatrix<f64>,
    variance_errors: Option<DMatrix<f64>>,
}

impl NoiseSweep {
    /// `variances` and `variance_errors` are `n_temps x n_freqs`.
    pub fn new(
        frequencies: Vec<f64>,
        temperatures: Vec<f64>,
        variances: DMatrix<f64>,
        variance_errors: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        if frequencies.is_empty() || frequencies.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(Error::InvalidArgument("frequencies must be positive and finite".into()));
        }
        if temperatures.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidArgument("temperatures must be positive and finite".into()));
        }
        if temperatures.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("temperatures must be strictly increasing".into()));
        }
        let shape = (temperatures.len(), frequencies.len());
        if variances.shape() != shape {
            return Err(Error::DimensionMismatch { expected: shape.0 * shape.1, found: variances.len() });
        }
        if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("variances must be positive and finite".into()));
        }
        if let Some(e) = &variance_errors {
            if e.shape() != shape {
                return Err(Error::DimensionMismatch { expected: shape.0 * shape.1, found: e.len() });
            }
            if e.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidArgument("variance errors must be positive and finite".into()));
            }
        }
        Ok(Self { frequencies, temperatures, variances, variance_errors })
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn temperatures(&self) -> &[f64] {
        &self.temperatures
    }

    pub fn variances(&self) -> &DMatrix<f64> {
        &self.variances
    }

    pub fn variance_errors(&self) -> Option<&DMatrix<f64>> {
        self.variance_errors.as_ref()
    }
}

/// Fit result for one frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalRecord {
    pub frequency_hz: f64,
    pub gain: f64,
    pub nbar: f64,
    pub sigma_gain: f64,
    pub sigma_nbar: f64,
    pub cov_gain_nbar: f64,
    /// The fitted `nbar` was negative and has been set to zero.
    pub nbar_clamped: bool,
}

impl CalRecord {
    /// Exact (zero-uncertainty) calibration.
    pub fn exact(frequency_hz: f64, gain: f64, nbar: f64) -> Self {
        Self { frequency_hz, gain, nbar, sigma_gain: 0.0, sigma_nbar: 0.0, cov_gain_nbar: 0.0, nbar_clamped: false }
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.frequency_hz, self.gain, self.nbar, self.sigma_gain, self.sigma_nbar, self.cov_gain_nbar]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite);
        }
        let bound = self.sigma_gain * self.sigma_nbar;
        let ok = self.frequency_hz > 0.0
            && self.gain > 0.0
            && self.nbar >= 0.0
            && self.sigma_gain >= 0.0
            && self.sigma_nbar >= 0.0
            && self.cov_gain_nbar.abs() <= bound * (1.0 + 1e-9) + f64::MIN_POSITIVE;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("inconsistent calibration record at {} Hz", self.frequency_hz)))
        }
    }
}

/// Per-frequency calibration of the amplification chain, sorted by frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplifierChainCal {
    records: Vec<CalRecord>,
}

impl AmplifierChainCal {
    pub fn new(mut records: Vec<CalRecord>) -> Result<Self> {
        for r in &records {
            r.validate()?;
        }
        records.sort_by(|a, b| a.frequency_hz.total_cmp(&b.frequency_hz));
        if records.windows(2).any(|w| freq_match(w[0].frequency_hz, w[1].frequency_hz)) {
            return Err(Error::InvalidArgument("duplicate calibration frequency".into()));
        }
        Ok(Self { records })
    }

    /// Same exact `(gain, nbar)` at every mode of `basis`.
    pub fn uniform(basis: &ModeBasis, gain: f64, nbar: f64) -> Result<Self> {
        Self::new(
            basis
                .labels()
                .iter()
                .map(|&l| CalRecord::exact(basis.frequency(l) / core::f64::consts::TAU, gain, nbar))
                .collect(),
        )
    }

    pub fn records(&self) -> &[CalRecord] {
        &self.records
    }

    /// Record at `frequency_hz` (relative tolerance [`FREQUENCY_MATCH_RTOL`]).
    pub fn lookup(&self, frequency_hz: f64) -> Result<&CalRecord> {
        let idx = self.records.partition_point(|r| r.frequency_hz < frequency_hz * (1.0 - FREQUENCY_MATCH_RTOL));
        self.records
            .get(idx)
            .filter(|r| freq_match(r.frequency_hz, frequency_hz))
            .ok_or(Error::MissingCalibration { frequency_hz })
    }

    /// Records for every mode of `basis`, in basis order.
    pub fn for_basis(&self, basis: &ModeBasis) -> Result<Vec<CalRecord>> {
        basis
            .labels()
            .iter()
            .map(|&l| self.lookup(basis.frequency(l) / core::f64::consts::TAU).copied())
            .collect()
    }
}

fn freq_match(a: f64, b: f64) -> bool {
    (a - b).abs() <= FREQUENCY_MATCH_RTOL * a.abs().max(b.abs())
}

fn coth(x: f64) -> f64 {
    1.0 / tanh(x)
}

fn thermal_factor(frequency_hz: f64, temperature_k: f64) -> Result<f64> {
    if !(temperature_k > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature_k}")));
    }
    if !(frequency_hz > 0.0) {
        return Err(Error::InvalidArgument(format!("frequency must be positive, got {frequency_hz}")));
    }
    Ok(coth(PLANCK * frequency_hz / (2.0 * BOLTZMANN * temperature_k)))
}

/// Amplified noise power spectral density (W/Hz).
pub fn planck_psd(gain: f64, nbar: f64, frequency_hz: f64, temperature_k: f64) -> Result<f64> {
    if !(gain > 0.0) || !(nbar >= 0.0) {
        return Err(Error::InvalidArgument(format!("need gain > 0 and nbar >= 0, got {gain}, {nbar}")));
    }
    let c = thermal_factor(frequency_hz, temperature_k)?;
    Ok(0.5 * gain * PLANCK * frequency_hz * (c + 2.0 * nbar + 1.0))
}

/// Voltage-noise variance `4 B P Z` (V^2) for bandwidth `B` in Hz.
pub fn voltage_variance_model(
    gain: f64,
    nbar: f64,
    frequency_hz: f64,
    temperature_k: f64,
    bandwidth_hz: f64,
    impedance: f64,
) -> Result<f64> {
    if !(bandwidth_hz > 0.0) || !(impedance > 0.0) {
        return Err(Error::InvalidArgument("bandwidth and impedance must be positive".into()));
    }
    Ok(4.0 * bandwidth_hz * planck_psd(gain, nbar, frequency_hz, temperature_k)? * impedance)
}

/// Least-squares weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FitWeighting {
    /// Inverse-variance weights (absolute) when the sweep carries errors,
    /// otherwise unweighted with the residual variance as the error scale.
    #[default]
    Auto,
    Unweighted,
}

/// Straight-line fit `y = a x + b` with optional absolute weights.
/// Returns `(a, b, var_a, var_b, cov_ab)`.
fn line_fit(x: &[f64], y: &[f64], w: Option<&[f64]>, frequency_hz: f64) -> Result<(f64, f64, f64, f64, f64)> {
    let n = x.len();
    let weight = |k: usize| w.map_or(1.0, |w| w[k]);
    let sw: f64 = (0..n).map(weight).sum();
    let xm = (0..n).map(|k| weight(k) * x[k]).sum::<f64>() / sw;
    let ym = (0..n).map(|k| weight(k) * y[k]).sum::<f64>() / sw;
    let sxx: f64 = (0..n).map(|k| weight(k) * (x[k] - xm) * (x[k] - xm)).sum();
    let sxy: f64 = (0..n).map(|k| weight(k) * (x[k] - xm) * (y[k] - ym)).sum();
    let sx2: f64 = (0..n).map(|k| weight(k) * x[k] * x[k]).sum();
    // Sxx / Σw x² equals det(XᵀWX) / (n11 n22).
    if !(sxx > 1e-10 * sx2) {
        return Err(Error::SingularDesign { frequency_hz });
    }
    let a = sxy / sxx;
    let b = ym - a * xm;
    let scale = match w {
        Some(_) => 1.0,
        None => {
            let rss: f64 = (0..n).map(|k| { let e = y[k] - a * x[k] - b; e * e }).sum();
            rss / (n as f64 - 2.0)
        }
    };
    let var_a = scale / sxx;
    let var_b = scale * (1.0 / sw + xm * xm / sxx);
    let cov_ab = -scale * xm / sxx;
    Ok((a, b, var_a, var_b, cov_ab))
}

/// Fits `(G, nbar)` independently at every sweep frequency.
pub fn fit_planck(
    sweep: &NoiseSweep,
    bandwidth_hz: f64,
    impedance: f64,
    weighting: FitWeighting,
) -> Result<AmplifierChainCal> {
    if !(bandwidth_hz > 0.0) || !(impedance > 0.0) {
        return Err(Error::InvalidArgument("bandwidth and impedance must be positive".into()));
    }
    let n_t = sweep.temperatures.len();
    if n_t < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 temperatures, got {n_t}")));
    }
    let mut records = Vec::with_capacity(sweep.frequencies.len());
    for (col, &f) in sweep.frequencies.iter().enumerate() {
        // y / c = a coth + b with c = 2 B Z h f.
        let c = 2.0 * bandwidth_hz * impedance * PLANCK * f;
        let x: Vec<f64> = sweep.temperatures.iter().map(|&t| thermal_factor(f, t)).collect::<Result<_>>()?;
        let y: Vec<f64> = (0..n_t).map(|r| sweep.variances[(r, col)] / c).collect();
        let w: Option<Vec<f64>> = match (weighting, &sweep.variance_errors) {
            (FitWeighting::Auto, Some(e)) => Some((0..n_t).map(|r| { let s = c / e[(r, col)]; s * s }).collect()),
            _ => None,
        };
        let (a, b, va, vb, cab) = line_fit(&x, &y, w.as_deref(), f)?;
        if !(a > 0.0) {
            return Err(Error::InvalidArgument(format!("fitted gain at {f} Hz is not positive ({a})")));
        }
        let nbar_raw = 0.5 * (b / a - 1.0);
        let (ja, jb) = (-b / (2.0 * a * a), 1.0 / (2.0 * a));
        let var_n = ja * ja * va + 2.0 * ja * jb * cab + jb * jb * vb;
        let cov_gn = ja * va + jb * cab;
        let sigma_gain = sqrt(va.max(0.0));
        let sigma_nbar = sqrt(var_n.max(0.0));
        let bound = sigma_gain * sigma_nbar;
        records.push(CalRecord {
            frequency_hz: f,
            gain: a,
            nbar: nbar_raw.max(0.0),
            sigma_gain,
            sigma_nbar,
            cov_gain_nbar: cov_gn.clamp(-bound, bound),
            nbar_clamped: nbar_raw < 0.0,
        });
    }
    AmplifierChainCal::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{exp, pow};
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    const B: f64 = 1e5;
    const Z: f64 = 50.0;

    fn temps(n: usize) -> Vec<f64> {
        (0..n).map(|k| 0.01 * pow(100.0, k as f64 / (n - 1) as f64)).collect()
    }

    fn sweep(freqs: &[f64], ts: &[f64], truth: &[(f64, f64)]) -> DMatrix<f64> {
        DMatrix::from_fn(ts.len(), freqs.len(), |r, c| {
            voltage_variance_model(truth[c].0, truth[c].1, freqs[c], ts[r], B, Z).unwrap()
        })
    }

    #[test]
    fn psd_limits_and_point_value() {
        let f = 4.2e9;
        let hf = PLANCK * f;
        // Low temperature: coth -> 1.
        let p0 = planck_psd(3.0, 2.0, f, 1e-4).unwrap();
        assert!((p0 - 3.0 * hf * 3.0).abs() < 1e-12 * p0);
        // High temperature: affine in T with slope G k_B.
        let (t1, t2) = (1e3, 2e3);
        let slope = (planck_psd(3.0, 2.0, f, t2).unwrap() - planck_psd(3.0, 2.0, f, t1).unwrap()) / (t2 - t1);
        assert!((slope - 3.0 * BOLTZMANN).abs() < 1e-6 * slope);
        // hf = 2 kT: coth(1) = 1.3130352854993312.
        let t = hf / (2.0 * BOLTZMANN);
        let p = planck_psd(1.0, 0.0, f, t).unwrap();
        let coth1 = (exp(2.0) + 1.0) / (exp(2.0) - 1.0);
        assert!((p - 0.5 * hf * (coth1 + 1.0)).abs() < 1e-14 * p);
        assert!((coth1 + 1.0 - 2.313_035_285_499_331).abs() < 1e-14);
        assert!(planck_psd(1.0, 0.0, f, 0.0).is_err());
    }

    #[test]
    fn variance_model_scalings() {
        let v = |g: f64, bw: f64, z: f64| voltage_variance_model(g, 1.0, 5e9, 0.1, bw, z).unwrap();
        let base = v(10.0, B, Z);
        assert!((v(10.0, 2.0 * B, Z) / base - 2.0).abs() < 1e-14);
        assert!((v(20.0, B, Z) / base - 2.0).abs() < 1e-14);
        assert!((v(10.0, B, 2.0 * Z) / base - 2.0).abs() < 1e-14);
    }

    #[test]
    fn noiseless_round_trip_is_exact() {
        let freqs = [4.0e9, 4.2e9, 4.4e9];
        let truth = [(100.0, 5.0), (1.0, 0.0), (3e4, 12.5)];
        let ts = temps(8);
        let sw = NoiseSweep::new(freqs.to_vec(), ts.clone(), sweep(&freqs, &ts, &truth), None).unwrap();
        let cal = fit_planck(&sw, B, Z, FitWeighting::Auto).unwrap();
        for (r, (g, n)) in cal.records().iter().zip(truth) {
            assert!((r.gain - g).abs() < 1e-10 * g);
            assert!((r.nbar - n).abs() < 1e-10 * n.max(1.0));
        }
    }

    #[test]
    fn linear_fit_agrees_with_direct_nonlinear_fit() {
        // Gauss-Newton in (G, nbar) directly on the variance model.
        let f = 4.2e9;
        let ts = temps(6);
        let (g0, n0) = (250.0, 3.5);
        let y: Vec<f64> = ts.iter().map(|&t| voltage_variance_model(g0, n0, f, t, B, Z).unwrap()).collect();
        let (mut g, mut n) = (100.0, 1.0);
        for _ in 0..50 {
            let mut jtj = [[0.0; 2]; 2];
            let mut jtr = [0.0; 2];
            for (k, &t) in ts.iter().enumerate() {
                let m = voltage_variance_model(g, n, f, t, B, Z).unwrap();
                let dg = m / g;
                let dn = 4.0 * B * Z * g * PLANCK * f;
                let r = (y[k] - m) / y[k];
                let (dg, dn) = (dg / y[k], dn / y[k]);
                jtj[0][0] += dg * dg;
                jtj[0][1] += dg * dn;
                jtj[1][1] += dn * dn;
                jtr[0] += dg * r;
                jtr[1] += dn * r;
            }
            let det = jtj[0][0] * jtj[1][1] - jtj[0][1] * jtj[0][1];
            g += (jtj[1][1] * jtr[0] - jtj[0][1] * jtr[1]) / det;
            n += (jtj[0][0] * jtr[1] - jtj[0][1] * jtr[0]) / det;
        }
        let sw = NoiseSweep::new(vec![f], ts.clone(), DMatrix::from_column_slice(ts.len(), 1, &y), None).unwrap();
        let r = fit_planck(&sw, B, Z, FitWeighting::Auto).unwrap().records()[0];
        assert!((r.gain - g).abs() < 1e-9 * g);
        assert!((r.nbar - n).abs() < 1e-9 * n);
    }

    fn noisy_fit(rng: &mut ChaCha8Rng, ts: &[f64], truth: (f64, f64), f: f64) -> CalRecord {
        let clean: Vec<f64> = ts.iter().map(|&t| voltage_variance_model(truth.0, truth.1, f, t, B, Z).unwrap()).collect();
        let err: Vec<f64> = clean.iter().map(|v| 0.01 * v).collect();
        let noisy: Vec<f64> = clean.iter().zip(&err).map(|(v, e)| v + e * rng.sample::<f64, _>(StandardNormal)).collect();
        let sw = NoiseSweep::new(
            vec![f],
            ts.to_vec(),
            DMatrix::from_column_slice(ts.len(), 1, &noisy),
            Some(DMatrix::from_column_slice(ts.len(), 1, &err)),
        )
        .unwrap();
        fit_planck(&sw, B, Z, FitWeighting::Auto).unwrap().records()[0]
    }

    #[test]
    fn sigmas_shrink_like_inverse_root_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r8 = noisy_fit(&mut rng, &temps(8), (100.0, 5.0), 4.2e9);
        let r32 = noisy_fit(&mut rng, &temps(32), (100.0, 5.0), 4.2e9);
        let ratio = r8.sigma_gain / r32.sigma_gain;
        assert!((ratio - 2.0).abs() < 0.3, "ratio {ratio}");
        let ratio_n = r8.sigma_nbar / r32.sigma_nbar;
        assert!((ratio_n - 2.0).abs() < 0.3, "ratio {ratio_n}");
    }

    #[test]
    fn frequencies_are_fit_independently() {
        let freqs: Vec<f64> = (0..5).map(|k| 4.0e9 + 1e8 * k as f64).collect();
        let truth: Vec<(f64, f64)> = (0..5).map(|k| (50.0 + 10.0 * k as f64, 1.0 + k as f64)).collect();
        let ts = temps(8);
        let v = sweep(&freqs, &ts, &truth);
        let a = fit_planck(&NoiseSweep::new(freqs.clone(), ts.clone(), v.clone(), None).unwrap(), B, Z, FitWeighting::Auto).unwrap();
        let mut v2 = v;
        for r in 0..ts.len() {
            v2[(r, 2)] *= 1.0 + 0.05 * r as f64;
        }
        let b = fit_planck(&NoiseSweep::new(freqs, ts, v2, None).unwrap(), B, Z, FitWeighting::Auto).unwrap();
        for k in [0, 1, 3, 4] {
            assert_eq!(a.records()[k], b.records()[k]);
        }
        assert_ne!(a.records()[2], b.records()[2]);
    }

    #[test]
    fn narrow_temperature_range_is_singular() {
        // Deep in the quantum regime coth is 1 at every point.
        let f = 4.2e9;
        let ts = vec![1e-4, 1.1e-4, 1.2e-4, 1.3e-4];
        let v = sweep(&[f], &ts, &[(10.0, 1.0)]);
        let sw = NoiseSweep::new(vec![f], ts, v, None).unwrap();
        assert!(matches!(fit_planck(&sw, B, Z, FitWeighting::Auto), Err(Error::SingularDesign { .. })));
    }

    #[test]
    fn negative_nbar_is_clamped_and_flagged() {
        // Data generated with b < a (nbar = -0.2) through the linear form.
        let f = 4.2e9;
        let ts = temps(5);
        let c = 2.0 * B * Z * PLANCK * f;
        let (a, b) = (10.0, 6.0);
        let y: Vec<f64> = ts.iter().map(|&t| c * (a * thermal_factor(f, t).unwrap() + b)).collect();
        let sw = NoiseSweep::new(vec![f], ts.clone(), DMatrix::from_column_slice(5, 1, &y), None).unwrap();
        let r = fit_planck(&sw, B, Z, FitWeighting::Auto).unwrap().records()[0];
        assert!(r.nbar_clamped);
        assert_eq!(r.nbar, 0.0);
    }

    #[test]
    fn validation() {
        assert!(NoiseSweep::new(vec![1e9], vec![0.2, 0.1, 0.3], DMatrix::from_element(3, 1, 1.0), None).is_err());
        let sw = NoiseSweep::new(vec![1e9], vec![0.1, 0.2], DMatrix::from_element(2, 1, 1.0), None).unwrap();
        assert!(fit_planck(&sw, B, Z, FitWeighting::Auto).is_err());
        assert!(CalRecord { cov_gain_nbar: 2.0, sigma_gain: 1.0, sigma_nbar: 1.0, ..CalRecord::exact(1e9, 1.0, 0.0) }
            .validate()
            .is_err());
    }

    #[test]
    fn lookup_by_frequency() {
        let b = ModeBasis::symmetric(core::f64::consts::TAU * 4.2e9, core::f64::consts::TAU * 1e5, 3).unwrap();
        let cal = AmplifierChainCal::uniform(&b, 10.0, 1.0).unwrap();
        assert_eq!(cal.for_basis(&b).unwrap().len(), 7);
        assert!(cal.lookup(4.2e9 + 3e5).is_ok());
        assert!(matches!(cal.lookup(4.2e9 + 4e5), Err(Error::MissingCalibration { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_identity(g in 1.0f64..1e5, n in 0.0f64..50.0, f in 1e9f64..1e10) {
            let ts = temps(6);
            let sw = NoiseSweep::new(vec![f], ts.clone(), sweep(&[f], &ts, &[(g, n)]), None).unwrap();
            let r = fit_planck(&sw, B, Z, FitWeighting::Auto).unwrap().records()[0];
            prop_assert!((r.gain - g).abs() < 1e-9 * g);
            prop_assert!((r.nbar - n).abs() < 1e-8 * n.max(1.0));
        }
    }
}
