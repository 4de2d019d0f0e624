//! Covariance and mean containers, and the volts-to-photon-number estimator.

use alloc::format;

use nalgebra::{DMatrix, DVector, Matrix2};

use crate::basis::{quadrature_index, ModeBasis, Quadrature};
use crate::error::{Error, Result};
use crate::math::sqrt;
use crate::{HBAR, VACUUM_VARIANCE};

/// Relative tolerance for accepting a matrix as symmetric.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Symmetric `2n x 2n` quadrature covariance in photon-number units.
///
/// Diagonal positivity is not enforced: constant records produce exact zeros,
/// and intermediate reconstructions may legitimately be unphysical.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    basis: ModeBasis,
    data: DMatrix<f64>,
}

impl CovarianceMatrix {
    /// Validates shape, finiteness and symmetry, then stores the exactly
    /// symmetrized matrix.
    pub fn new(basis: ModeBasis, data: DMatrix<f64>) -> Result<Self> {
        let dim = basis.dim();
        if data.nrows() != dim || data.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: if data.nrows() != dim { data.nrows() } else { data.ncols() },
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let scale = data.amax().max(f64::MIN_POSITIVE);
        let mut asym: f64 = 0.0;
        for i in 0..dim {
            for j in (i + 1)..dim {
                asym = asym.max((data[(i, j)] - data[(j, i)]).abs());
            }
        }
        if asym > SYMMETRY_TOLERANCE * scale {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        Ok(Self::from_symmetrized(basis, data))
    }

    /// Builds from any square matrix of the right size by averaging it with
    /// its transpose. Shape is the caller's responsibility.
    pub(crate) fn from_symmetrized(basis: ModeBasis, data: DMatrix<f64>) -> Self {
        debug_assert_eq!(data.nrows(), basis.dim());
        Self { basis, data: symmetrize(data) }
    }

    /// Symmetrizes `data` and wraps it, checking only shape and finiteness.
    pub fn symmetrized(basis: ModeBasis, data: DMatrix<f64>) -> Result<Self> {
        let dim = basis.dim();
        if data.nrows() != dim || data.ncols() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: data.nrows() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self::from_symmetrized(basis, data))
    }

    pub fn vacuum(basis: ModeBasis) -> Self {
        Self::thermal(basis, 0.0)
    }

    /// `(nbar + 1/2) I`.
    pub fn thermal(basis: ModeBasis, nbar: f64) -> Self {
        let dim = basis.dim();
        Self { basis, data: DMatrix::identity(dim, dim) * (nbar + VACUUM_VARIANCE) }
    }

    pub fn basis(&self) -> &ModeBasis {
        &self.basis
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_modes(&self) -> usize {
        self.basis.n_modes()
    }

    /// Element `Cov(q_a of mode i, q_b of mode j)`.
    pub fn element(&self, i: i32, qa: Quadrature, j: i32, qb: Quadrature) -> Result<f64> {
        Ok(self.data[(self.basis.index_of(i, qa)?, self.basis.index_of(j, qb)?)])
    }

    /// `[[Cov(x_i,x_j), Cov(x_i,p_j)], [Cov(p_i,x_j), Cov(p_i,p_j)]]`.
    pub fn block(&self, i: i32, j: i32) -> Result<Matrix2<f64>> {
        let a = self.basis.position_of(i)?;
        let b = self.basis.position_of(j)?;
        Ok(self.block_at(a, b))
    }

    /// Block by basis positions.
    pub fn block_at(&self, a: usize, b: usize) -> Matrix2<f64> {
        let (r, c) = (quadrature_index(a, Quadrature::X), quadrature_index(b, Quadrature::X));
        self.data.fixed_view::<2, 2>(r, c).into_owned()
    }

    pub fn trace(&self) -> f64 {
        self.data.trace()
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &CovarianceMatrix) -> f64 {
        (&self.data - &other.data).amax()
    }

    pub(crate) fn ensure_same_basis(&self, other: &ModeBasis) -> Result<()> {
        if &self.basis == other {
            Ok(())
        } else {
            Err(Error::BasisMismatch)
        }
    }
}

/// `(A + A^T) / 2`, bitwise symmetric.
pub(crate) fn symmetrize(mut a: DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a
}

/// Quadrature expectation values, ordered like [`CovarianceMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct MeanVector {
    basis: ModeBasis,
    data: DVector<f64>,
}

impl MeanVector {
    pub fn new(basis: ModeBasis, data: DVector<f64>) -> Result<Self> {
        if data.len() != basis.dim() {
            return Err(Error::DimensionMismatch { expected: basis.dim(), found: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { basis, data })
    }

    pub fn zeros(basis: ModeBasis) -> Self {
        let dim = basis.dim();
        Self { basis, data: DVector::zeros(dim) }
    }

    pub fn basis(&self) -> &ModeBasis {
        &self.basis
    }

    pub fn data(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn get(&self, label: i32, q: Quadrature) -> Result<f64> {
        Ok(self.data[self.basis.index_of(label, q)?])
    }
}

/// Raw demodulated quadratures in volts, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRecord {
    basis: ModeBasis,
    samples: DMatrix<f64>,
}

impl QuadratureRecord {
    pub fn new(basis: ModeBasis, samples: DMatrix<f64>) -> Result<Self> {
        if samples.ncols() != basis.dim() {
            return Err(Error::DimensionMismatch { expected: basis.dim(), found: samples.ncols() });
        }
        if samples.nrows() < 2 {
            return Err(Error::TooFewSamples(samples.nrows()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { basis, samples })
    }

    pub fn basis(&self) -> &ModeBasis {
        &self.basis
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn n_samples(&self) -> usize {
        self.samples.nrows()
    }
}

/// Load impedance and measurement bandwidth that fix the voltage scale of
/// each mode: a quadrature of mode `i` in volts is `sqrt(Z hbar Delta w_i)`
/// times its photon-number-unit value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoltageScale {
    /// Ohms.
    pub impedance: f64,
    /// Measurement bandwidth (rad/s).
    pub bandwidth: f64,
}

impl VoltageScale {
    pub fn new(impedance: f64, bandwidth: f64) -> Result<Self> {
        if !(impedance > 0.0 && impedance.is_finite()) {
            return Err(Error::InvalidArgument(format!("impedance must be positive, got {impedance}")));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Self { impedance, bandwidth })
    }

    /// `Z hbar Delta w`, the voltage variance per photon-number unit (V^2).
    pub fn variance_unit(&self, omega: f64) -> f64 {
        self.impedance * HBAR * self.bandwidth * omega
    }

    /// Per-quadrature volts per photon-number-unit amplitude.
    pub fn amplitude_scales(&self, basis: &ModeBasis) -> DVector<f64> {
        DVector::from_iterator(
            basis.dim(),
            (0..basis.dim()).map(|k| sqrt(self.variance_unit(basis.frequency_at(ModeBasis::mode_of_index(k))))),
        )
    }
}

/// Streaming sample covariance (`n - 1` normalization) over row chunks,
/// merged with the pairwise update of Chan, Golub and LeVeque.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    count: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { count: 0, mean: DVector::zeros(dim), m2: DMatrix::zeros(dim, dim) }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Adds every row of `chunk`.
    pub fn push_chunk(&mut self, chunk: &DMatrix<f64>) {
        let nb = chunk.nrows();
        if nb == 0 {
            return;
        }
        assert_eq!(chunk.ncols(), self.mean.len(), "chunk width must match accumulator dimension");
        let mean_b: DVector<f64> = chunk.row_mean().transpose();
        let mut centered = chunk.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean_b.transpose();
        }
        let m2_b = centered.tr_mul(&centered);

        let na = self.count as f64;
        let nbf = nb as f64;
        let n = na + nbf;
        let delta = &mean_b - &self.mean;
        self.mean += &delta * (nbf / n);
        self.m2 += m2_b;
        self.m2.ger(na * nbf / n, &delta, &delta, 1.0);
        self.count += nb;
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Unbiased covariance, exactly symmetric.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        if self.count < 2 {
            return Err(Error::TooFewSamples(self.count));
        }
        Ok(symmetrize(&self.m2 / (self.count as f64 - 1.0)))
    }

    /// Converts the accumulated volt statistics to photon-number units.
    pub fn finish(
        &self,
        basis: &ModeBasis,
        scale: VoltageScale,
    ) -> Result<(CovarianceMatrix, MeanVector)> {
        if basis.dim() != self.mean.len() {
            return Err(Error::DimensionMismatch { expected: basis.dim(), found: self.mean.len() });
        }
        let s = scale.amplitude_scales(basis);
        let mut cov = self.covariance()?;
        for j in 0..cov.ncols() {
            for i in 0..cov.nrows() {
                cov[(i, j)] /= s[i] * s[j];
            }
        }
        let mean = self.mean.component_div(&s);
        Ok((
            CovarianceMatrix::from_symmetrized(basis.clone(), cov),
            MeanVector::new(basis.clone(), mean)?,
        ))
    }
}

/// Sample covariance and mean of a record in photon-number units:
/// `V_ab = Cov(v_a, v_b) / (Z hbar Delta sqrt(w_a w_b))`.
pub fn covariance_from_samples(
    rec: &QuadratureRecord,
    impedance: f64,
    bandwidth: f64,
) -> Result<(CovarianceMatrix, MeanVector)> {
    let scale = VoltageScale::new(impedance, bandwidth)?;
    let mut acc = CovarianceAccumulator::new(rec.basis.dim());
    acc.push_chunk(&rec.samples);
    acc.finish(&rec.basis, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    const W0: f64 = 2.0 * PI * 4.2e9;
    const DELTA: f64 = 2.0 * PI * 1e5;
    const Z: f64 = 50.0;

    fn basis(labels: &[i32]) -> ModeBasis {
        ModeBasis::new(W0, DELTA, labels.to_vec()).unwrap()
    }

    // Two-pass textbook estimator used as the reference.
    fn two_pass(samples: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = samples.shape();
        let mut mean = DVector::zeros(d);
        for r in 0..n {
            for c in 0..d {
                mean[c] += samples[(r, c)];
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in 0..n {
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += (samples[(r, a)] - mean[a]) * (samples[(r, b)] - mean[b]);
                }
            }
        }
        (mean, cov / (n as f64 - 1.0))
    }

    #[test]
    fn vacuum_block_and_transpose_symmetry() {
        let v = CovarianceMatrix::vacuum(basis(&[-1, 0, 1]));
        assert_eq!(v.block(0, 0).unwrap(), Matrix2::new(0.5, 0.0, 0.0, 0.5));
        let mut d = DMatrix::from_fn(6, 6, |i, j| (i * 7 + j * 3) as f64 * 0.01);
        d = &d + d.transpose();
        let v = CovarianceMatrix::new(basis(&[-1, 0, 1]), d).unwrap();
        assert_eq!(v.block(-1, 1).unwrap(), v.block(1, -1).unwrap().transpose());
        assert_eq!(v.block(2, 1), Err(Error::UnknownLabel(2)));
    }

    #[test]
    fn rejects_asymmetric_and_wrong_size() {
        let b = basis(&[0]);
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(CovarianceMatrix::new(b.clone(), d), Err(Error::NotSymmetric { .. })));
        assert!(matches!(
            CovarianceMatrix::new(b, DMatrix::identity(4, 4)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn vacuum_normalization_single_mode() {
        let b = basis(&[3]);
        let scale = VoltageScale::new(Z, DELTA).unwrap();
        let sd = sqrt(scale.variance_unit(b.frequency(3)) / 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let s = DMatrix::from_fn(n, 2, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
        let rec = QuadratureRecord::new(b, s).unwrap();
        let (v, m) = covariance_from_samples(&rec, Z, DELTA).unwrap();
        // Standard error of a variance estimate is sqrt(2/n) * sigma^2.
        let se = 0.5 * sqrt(2.0 / n as f64);
        assert!((v.data()[(0, 0)] - 0.5).abs() < 5.0 * se);
        assert!((v.data()[(1, 1)] - 0.5).abs() < 5.0 * se);
        assert!(m.data().amax() < 5.0 * sqrt(0.5 / n as f64));
    }

    #[test]
    fn constant_samples_give_zero_covariance() {
        let b = basis(&[0]);
        let s = DMatrix::from_element(10, 2, 3e-6);
        let rec = QuadratureRecord::new(b.clone(), s).unwrap();
        let (v, m) = covariance_from_samples(&rec, Z, DELTA).unwrap();
        assert!(v.data().amax() < 1e-20);
        let norm = sqrt(Z * HBAR * DELTA * W0);
        assert!((m.data()[0] - 3e-6 / norm).abs() < 1e-12 * m.data()[0]);
    }

    #[test]
    fn correlated_pair_matches_two_pass() {
        let b = basis(&[-2, 2]);
        let scale = VoltageScale::new(Z, DELTA).unwrap();
        let s = scale.amplitude_scales(&b);
        let rho: f64 = 0.6;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 5000;
        let mut data = DMatrix::zeros(n, 4);
        for r in 0..n {
            let z: [f64; 4] = core::array::from_fn(|_| rng.sample(StandardNormal));
            data[(r, 0)] = z[0];
            data[(r, 1)] = z[1];
            data[(r, 2)] = rho * z[0] + sqrt(1.0 - rho * rho) * z[2];
            data[(r, 3)] = z[3];
        }
        for r in 0..n {
            for c in 0..4 {
                data[(r, c)] *= s[c];
            }
        }
        let (mean_ref, cov_ref) = two_pass(&data);
        let rec = QuadratureRecord::new(b, data).unwrap();
        let (v, m) = covariance_from_samples(&rec, Z, DELTA).unwrap();
        for a in 0..4 {
            assert!((m.data()[a] - mean_ref[a] / s[a]).abs() < 1e-10);
            for c in 0..4 {
                let want = cov_ref[(a, c)] / (s[a] * s[c]);
                assert!((v.data()[(a, c)] - want).abs() < 1e-10, "{a},{c}");
            }
        }
        let off = v.data()[(0, 2)];
        let gm = sqrt(v.data()[(0, 0)] * v.data()[(2, 2)]);
        assert!((off / gm - rho).abs() < 0.05);
    }

    #[test]
    fn chunked_equals_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = DMatrix::from_fn(1000, 6, |_, _| rng.sample::<f64, _>(StandardNormal) + 2.0);
        let mut whole = CovarianceAccumulator::new(6);
        whole.push_chunk(&data);
        let mut parts = CovarianceAccumulator::new(6);
        for start in (0..1000).step_by(137) {
            let len = 137.min(1000 - start);
            parts.push_chunk(&data.rows(start, len).into_owned());
        }
        assert_eq!(parts.count(), 1000);
        let d = (whole.covariance().unwrap() - parts.covariance().unwrap()).amax();
        assert!(d < 1e-12);
    }

    #[test]
    fn too_few_samples() {
        let b = basis(&[0]);
        let e = QuadratureRecord::new(b, DMatrix::zeros(1, 2));
        assert_eq!(e, Err(Error::TooFewSamples(1)));
    }

    #[test]
    fn element_lookup() {
        let b = basis(&[-1, 1]);
        let mut d = DMatrix::identity(4, 4) * 0.5;
        d[(1, 2)] = 0.3;
        d[(2, 1)] = 0.3;
        let v = CovarianceMatrix::new(b, d).unwrap();
        assert_eq!(v.element(-1, Quadrature::P, 1, Quadrature::X).unwrap(), 0.3);
        assert_eq!(v.block(-1, 1).unwrap()[(1, 0)], 0.3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn estimator_is_symmetric_psd_and_bilinear(seed in 0u64..1000, c in 0.1f64..10.0) {
            let b = basis(&[-1, 0, 1]);
            let scale = VoltageScale::new(Z, DELTA).unwrap();
            let s = scale.amplitude_scales(&b);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = DMatrix::from_fn(50, 6, |_, j| s[j] * rng.sample::<f64, _>(StandardNormal));
            let rec = QuadratureRecord::new(b.clone(), data.clone()).unwrap();
            let (v, _) = covariance_from_samples(&rec, Z, DELTA).unwrap();
            prop_assert_eq!(v.data(), &v.data().transpose());
            let min_eig = v.data().clone().symmetric_eigenvalues().min();
            prop_assert!(min_eig > -1e-12 * v.data().amax());

            let rec2 = QuadratureRecord::new(b, data * c).unwrap();
            let (v2, _) = covariance_from_samples(&rec2, Z, DELTA).unwrap();
            let d = (v2.data() - v.data() * (c * c)).amax();
            prop_assert!(d < 1e-10 * v2.data().amax());
        }
    }
}
