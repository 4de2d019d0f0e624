//! Gaussian covariance toolkit for frequency-comb squeezing experiments.
//!
//! The crate covers the whole numerical chain between raw demodulated
//! quadratures and a verified cluster-state nullifier test:
//!
//! - [`basis`] and [`covariance`]: mode bookkeeping, the covariance/mean
//!   containers and the volts-to-photon-number normalization.
//! - [`gaussian`]: quadrature rotations, the Heisenberg physicality test,
//!   symplectic eigenvalues and two-mode squeezing ellipses.
//! - [`calibration`]: Planck-spectroscopy fit of amplifier gain and added noise.
//! - [`reconstruction`]: the amplification chain as a Gaussian channel, its
//!   inversion and error propagation.
//! - [`projection`]: nearest physical covariance under an error-weighted
//!   Chebyshev objective.
//! - [`cluster`]: canonical graphs from pump schemes, nullifier statistics and
//!   rotation-angle scans.
//! - [`dynamics`]: drift/diffusion moment equations for a multi-pump parametric
//!   amplifier, steady states, squeezing sweeps and synthetic measurements.
//!
//! Covariances are expressed in photon-number units where the vacuum variance
//! of each quadrature is 1/2. The quadrature vector is packed as
//! `(x_{i1}, p_{i1}, x_{i2}, p_{i2}, ...)` by ascending mode label.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod basis;
pub mod calibration;
pub mod cluster;
pub mod covariance;
pub mod dynamics;
pub mod error;
pub mod gaussian;
pub mod linalg;
pub(crate) mod math;
pub mod projection;
pub mod reconstruction;

pub use basis::{quadrature_index, ModeBasis, Quadrature};
pub use calibration::{AmplifierChainCal, CalRecord, NoiseSweep};
pub use cluster::{CanonicalGraph, EdgeSigns, NullifierReport, PumpConfig, PumpTone};
pub use covariance::{CovarianceMatrix, MeanVector, QuadratureRecord, VoltageScale};
pub use dynamics::{DriftDiffusion, DynamicsModel};
pub use error::{Error, Result};
pub use gaussian::{PairSelector, SqueezingEllipse, SymplecticForm};
pub use projection::{ProjectionOptions, ProjectionResult};
pub use reconstruction::{ChannelModel, ErrorMatrix};

/// Reduced Planck constant (J s).
pub const HBAR: f64 = 1.054_571_817e-34;
/// Planck constant (J s).
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Boltzmann constant (J/K).
pub const BOLTZMANN: f64 = 1.380_649e-23;
/// Quadrature variance of the vacuum in photon-number units.
pub const VACUUM_VARIANCE: f64 = 0.5;
