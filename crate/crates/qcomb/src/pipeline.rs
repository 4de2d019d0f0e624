//! End-to-end analysis chain shared by the subcommands.

use std::path::Path;

use qcomb_core::cluster::{build_graphs, nullifier_report, theta_scan, ThetaScan};
use qcomb_core::covariance::CovarianceAccumulator;
use qcomb_core::dynamics::{build_drift_diffusion, evolve_covariance, steady_state, MeasurementSynth};
use qcomb_core::gaussian::{default_theta_grid, physicality_check, rotate};
use qcomb_core::projection::{nearest_physical, ProjectionResult};
use qcomb_core::reconstruction::{propagate_errors, recover_quantum};
use qcomb_core::{
    AmplifierChainCal, CanonicalGraph, CovarianceMatrix, ErrorMatrix, ModeBasis, NullifierReport, VoltageScale,
};
use serde::Serialize;
use serde_json::json;

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::io;

/// Rows per synthesis or read chunk.
pub const CHUNK_ROWS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SimulateMode {
    /// Steady state, requires a positive loss rate.
    Steady,
    /// Evolution from vacuum.
    Evolve { t_final: f64, dt: f64 },
}

pub fn simulate(cfg: &PipelineConfig, mode: SimulateMode) -> Result<CovarianceMatrix, CliError> {
    let model = cfg.dynamics_model()?;
    let dd = build_drift_diffusion(&model);
    match mode {
        SimulateMode::Steady => {
            if model.loss_rate <= 0.0 {
                return Err(CliError::Validation("steady state needs dynamics.loss_rate > 0".into()));
            }
            Ok(steady_state(&dd)?)
        }
        SimulateMode::Evolve { t_final, dt } => {
            Ok(evolve_covariance(&dd, &CovarianceMatrix::vacuum(model.basis.clone()), t_final, dt)?)
        }
    }
}

/// Steady state when lossy, otherwise evolution over the configured time.
pub fn default_mode(cfg: &PipelineConfig) -> Result<SimulateMode, CliError> {
    if cfg.dynamics.loss_rate > 0.0 {
        return Ok(SimulateMode::Steady);
    }
    let model = cfg.dynamics_model()?;
    let (t_final, dt) = cfg.evolution_times(&model);
    Ok(SimulateMode::Evolve { t_final, dt })
}

pub fn load_cal(cfg: &PipelineConfig) -> Result<AmplifierChainCal, CliError> {
    match &cfg.paths.cal {
        Some(p) => io::read_cal(p),
        None => cfg.uniform_cal(),
    }
}

/// Photon-unit covariances of the pump-on and pump-off records and their
/// sample standard errors.
#[derive(Debug, Clone)]
pub struct Measured {
    pub vmeas: CovarianceMatrix,
    pub vmeas0: CovarianceMatrix,
    pub sigma_meas: ErrorMatrix,
    pub sigma_meas0: ErrorMatrix,
    pub n_samples: usize,
}

fn measured(
    basis: &ModeBasis,
    scale: VoltageScale,
    on: (&CovarianceAccumulator, usize),
    off: (&CovarianceAccumulator, usize),
) -> Result<Measured, CliError> {
    let (vmeas, _) = on.0.finish(basis, scale)?;
    let (vmeas0, _) = off.0.finish(basis, scale)?;
    Ok(Measured {
        sigma_meas: ErrorMatrix::sample_standard_error(&vmeas, on.1)?,
        sigma_meas0: ErrorMatrix::sample_standard_error(&vmeas0, off.1)?,
        vmeas,
        vmeas0,
        n_samples: on.1.min(off.1),
    })
}

/// Synthesizes `n` pump-on and pump-off rows from `vq` and accumulates them.
pub fn synthesize_and_measure(
    vq: &CovarianceMatrix,
    cal: &AmplifierChainCal,
    scale: VoltageScale,
    n: usize,
    seed: u64,
) -> Result<Measured, CliError> {
    if n < 2 {
        return Err(CliError::Validation(format!("need at least 2 samples, got {n}")));
    }
    let synth = MeasurementSynth::new(vq, cal, scale, seed)?;
    let dim = vq.dim();
    // The two streams are independent, so each copy advances only one.
    let accumulate = |mut s: MeasurementSynth, pump_on: bool| {
        let mut acc = CovarianceAccumulator::new(dim);
        let mut left = n;
        while left > 0 {
            let rows = left.min(CHUNK_ROWS);
            acc.push_chunk(&if pump_on { s.pump_on(rows) } else { s.pump_off(rows) });
            left -= rows;
        }
        acc
    };
    let other = synth.clone();
    let (on, off) = rayon::join(|| accumulate(other, true), || accumulate(synth, false));
    measured(vq.basis(), scale, (&on, n), (&off, n))
}

/// Accumulates two record files.
pub fn measure_records(
    template: &ModeBasis,
    scale: VoltageScale,
    meas: &Path,
    meas0: &Path,
) -> Result<Measured, CliError> {
    let mut acc: Option<CovarianceAccumulator> = None;
    let (labels, n_on) = io::read_records(meas, CHUNK_ROWS, |c| {
        acc.get_or_insert_with(|| CovarianceAccumulator::new(c.ncols())).push_chunk(c)
    })?;
    let mut acc0: Option<CovarianceAccumulator> = None;
    let (labels0, n_off) = io::read_records(meas0, CHUNK_ROWS, |c| {
        acc0.get_or_insert_with(|| CovarianceAccumulator::new(c.ncols())).push_chunk(c)
    })?;
    if labels != labels0 {
        return Err(CliError::Validation("pump-on and pump-off records have different modes".into()));
    }
    let basis = io::basis_for(template, labels)?;
    let empty = || CliError::Validation("records need at least 2 rows".into());
    let (acc, acc0) = (acc.ok_or_else(empty)?, acc0.ok_or_else(empty)?);
    measured(&basis, scale, (&acc, n_on), (&acc0, n_off))
}

#[derive(Debug, Clone)]
pub struct Reconstructed {
    pub vquant: CovarianceMatrix,
    pub sigma: ErrorMatrix,
    pub flagged: Vec<(usize, usize)>,
}

pub fn reconstruct(m: &Measured, cal: &AmplifierChainCal, cfg: &PipelineConfig) -> Result<Reconstructed, CliError> {
    let vquant = recover_quantum(&m.vmeas, &m.vmeas0, cal)?;
    let p = propagate_errors(&m.vmeas, &m.vmeas0, cal, &m.sigma_meas, &m.sigma_meas0, cfg.propagation_rule())?;
    Ok(Reconstructed { vquant, sigma: p.sigma, flagged: p.flagged })
}

pub fn projection_json(p: &ProjectionResult, hash: &str) -> serde_json::Value {
    json!({
        "config_hash": hash,
        "objective": p.objective,
        "iterations": p.iterations,
        "min_eig": p.min_eig,
        "constraint_violation": p.constraint_violation,
        "baseline_objective": p.baseline_objective,
        "converged": p.converged,
    })
}

pub fn scan_rows(scan: &ThetaScan) -> Vec<Vec<f64>> {
    scan.points.iter().map(|p| vec![p.theta, p.mean_db, p.std_db]).collect()
}

pub fn report_json(report: &NullifierReport, theta: f64, hash: &str) -> serde_json::Value {
    let nodes: Vec<_> = report
        .nodes
        .iter()
        .map(|n| {
            json!({
                "node": n.node,
                "mean": n.mean,
                "variance": n.variance,
                "vacuum_variance": n.vacuum_variance,
                "db": n.db,
                "sigma_variance": n.sigma_variance,
                "sigma_db": n.sigma_db,
            })
        })
        .collect();
    json!({
        "config_hash": hash,
        "theta": theta,
        "mean_db": report.mean_db,
        "std_db": report.std_db,
        "nodes": nodes,
    })
}

/// Uncertainties of the rotated covariance, treating elements as independent:
/// `var(R V R^T)_ab = sum_cd R_ac^2 R_bd^2 sigma_cd^2`.
pub fn rotate_sigma(sigma: &ErrorMatrix, theta: f64) -> Result<ErrorMatrix, CliError> {
    let (s, c) = theta.sin_cos();
    let r2 = [[c * c, s * s], [s * s, c * c]];
    let d = sigma.data();
    let out = nalgebra::DMatrix::from_fn(d.nrows(), d.ncols(), |a, b| {
        let (ma, mb) = (a / 2 * 2, b / 2 * 2);
        let mut var = 0.0;
        for ci in 0..2 {
            for di in 0..2 {
                var += r2[a % 2][ci] * r2[b % 2][di] * d[(ma + ci, mb + di)].powi(2);
            }
        }
        var.sqrt()
    });
    Ok(ErrorMatrix::new(sigma.basis().clone(), out)?)
}

pub fn graphs(cfg: &PipelineConfig, basis: &ModeBasis) -> Result<Vec<CanonicalGraph>, CliError> {
    Ok(build_graphs(&cfg.pump_config()?, basis, cfg.edge_signs())?)
}

#[derive(Debug, Clone, Serialize)]
pub struct ProjectionSummary {
    pub objective: f64,
    pub baseline_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub min_eig: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineSummary {
    pub config_hash: String,
    pub n_modes: usize,
    pub n_samples: usize,
    pub synthesized: bool,
    /// Scan of the simulated state, absent when records were read from disk.
    pub direct_best_theta: Option<f64>,
    pub direct_mean_db: Option<f64>,
    pub reconstructed_min_eig: f64,
    pub projection: ProjectionSummary,
    pub best_theta: f64,
    pub mean_db: f64,
    pub std_db: f64,
}

/// Runs the whole chain and writes every intermediate into `out`.
///
/// Pump-on/off records are read from `paths.meas`/`paths.meas0` when both
/// are configured, otherwise synthesized from the simulated state.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineSummary, CliError> {
    let hash = cfg.hash();
    let basis = cfg.basis()?;
    let scale = cfg.voltage_scale()?;
    let cal = load_cal(cfg)?;
    let grid = default_theta_grid();
    let labels = basis.labels().to_vec();

    let (measured, direct) = match (&cfg.paths.meas, &cfg.paths.meas0) {
        (Some(m), Some(m0)) => (measure_records(&basis, scale, m, m0)?, None),
        (None, None) => {
            let v = simulate(cfg, default_mode(cfg)?)?;
            io::write_matrix(&out.join("vsim.csv"), &hash, &labels, v.data())?;
            let m = synthesize_and_measure(&v, &cal, scale, cfg.n_samples, cfg.seed)?;
            let direct = theta_scan(&v, &graphs(cfg, &basis)?, &grid)?;
            (m, Some(direct))
        }
        _ => return Err(CliError::Validation("paths.meas and paths.meas0 must be given together".into())),
    };
    let basis = measured.vmeas.basis().clone();
    let labels = basis.labels().to_vec();
    io::write_matrix(&out.join("vmeas.csv"), &hash, &labels, measured.vmeas.data())?;
    io::write_matrix(&out.join("vmeas0.csv"), &hash, &labels, measured.vmeas0.data())?;

    let rec = reconstruct(&measured, &cal, cfg)?;
    io::write_matrix(&out.join("vquant.csv"), &hash, &labels, rec.vquant.data())?;
    io::write_matrix(&out.join("sigma.csv"), &hash, &labels, rec.sigma.data())?;
    let raw = physicality_check(&rec.vquant, 0.0)?;

    let proj = nearest_physical(&rec.vquant, &rec.sigma, &cfg.projection_options())?;
    let vphys = proj.v.clone();
    io::write_matrix(&out.join("vphys.csv"), &hash, &labels, vphys.data())?;
    io::write_json(&out.join("projection.json"), &projection_json(&proj, &hash))?;

    let gs = graphs(cfg, &basis)?;
    let scan = theta_scan(&vphys, &gs, &grid)?;
    io::write_table(&out.join("scan.csv"), &hash, &["theta", "mean_db", "std_db"], &scan_rows(&scan))?;
    let sigma_rot = rotate_sigma(&rec.sigma, scan.best_theta)?;
    let report = nullifier_report(&rotate(&vphys, scan.best_theta), None, &gs, Some(&sigma_rot))?;
    io::write_json(&out.join("nullifier.json"), &report_json(&report, scan.best_theta, &hash))?;

    let summary = PipelineSummary {
        config_hash: hash.clone(),
        n_modes: basis.n_modes(),
        n_samples: measured.n_samples,
        synthesized: direct.is_some(),
        direct_best_theta: direct.as_ref().map(|d| d.best_theta),
        direct_mean_db: direct.as_ref().map(|d| d.best_mean_db),
        reconstructed_min_eig: raw.min_eig,
        projection: ProjectionSummary {
            objective: proj.objective,
            baseline_objective: proj.baseline_objective,
            iterations: proj.iterations,
            converged: proj.converged,
            min_eig: proj.min_eig,
        },
        best_theta: scan.best_theta,
        mean_db: report.mean_db,
        std_db: report.std_db,
    };
    io::write_json(&out.join("summary.json"), &serde_json::to_value(&summary).expect("summary serializes"))?;
    Ok(summary)
}
