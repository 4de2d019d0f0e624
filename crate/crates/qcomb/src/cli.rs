//! Subcommand definitions and dispatch.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use qcomb_core::calibration::{fit_planck, FitWeighting};
use qcomb_core::cluster::{nullifier_report, theta_scan};
use qcomb_core::dynamics::{sweep_point, MeasurementSynth, SweepOptions};
use qcomb_core::gaussian::{pair_scan, rotate, PairSelector};
use qcomb_core::linalg::linspace;
use qcomb_core::projection::nearest_physical;
use qcomb_core::{CovarianceMatrix, ErrorMatrix};
use rayon::prelude::*;
use serde_json::json;

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::io;
use crate::pipeline::{self, SimulateMode};

#[derive(Debug, Parser)]
#[command(name = "qcomb", version, about = "Frequency-comb squeezing and cluster-state analysis")]
pub struct Cli {
    /// Pipeline configuration (JSON). Built-in three-pump defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for output files (overrides paths.output_dir).
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit per-frequency gain and added noise from a temperature sweep.
    Calibrate(CalibrateArgs),
    /// Recover the quantum covariance and its uncertainties from records.
    Reconstruct(ReconstructArgs),
    /// Nearest physical covariance under the error-weighted objective.
    Project(ProjectArgs),
    /// Per-node nullifier report.
    Nullifier(NullifierArgs),
    /// Mean nullifier dB over a rotation grid.
    Scan(ScanArgs),
    /// Two-mode squeezing ellipse over a rotation grid.
    ScanEllipse(EllipseArgs),
    /// Simulated covariance of the configured pump scheme.
    Simulate(SimulateArgs),
    /// Squeezing over a grid of pump strengths and loss rates.
    Sweep(SweepArgs),
    /// Synthetic pump-on and pump-off voltage records.
    Synth(SynthArgs),
    /// Simulate, synthesize, reconstruct, project, scan and report.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Variance table: temperature_k column, one column per frequency (Hz).
    #[arg(long)]
    pub sweep: PathBuf,
    /// Uncertainties with the same layout as the sweep.
    #[arg(long)]
    pub errors: Option<PathBuf>,
    /// Measurement bandwidth (Hz).
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Line impedance (ohm).
    #[arg(long)]
    pub impedance: Option<f64>,
    /// Ignore the uncertainties when fitting.
    #[arg(long)]
    pub unweighted: bool,
    #[arg(long, default_value = "cal.csv")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Pump-on record CSV.
    #[arg(long)]
    pub meas: Option<PathBuf>,
    /// Pump-off record CSV.
    #[arg(long)]
    pub meas0: Option<PathBuf>,
    /// Calibration CSV; uniform amplifier from the config when absent.
    #[arg(long)]
    pub cal: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub vq: PathBuf,
    #[arg(long)]
    pub sigma: PathBuf,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Args)]
pub struct NullifierArgs {
    #[arg(long)]
    pub v: PathBuf,
    /// Graph JSON; built from the configured pumps when absent.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub sigma: Option<PathBuf>,
    /// Rotation applied to every mode before evaluation.
    #[arg(long, default_value = "0")]
    pub theta: String,
    #[arg(long, default_value = "nullifier.json")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[arg(long)]
    pub v: PathBuf,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// start:stop:count, `pi` allowed as a factor.
    #[arg(long, default_value = "0:pi:400")]
    pub grid: String,
    #[arg(long, default_value = "scan.csv")]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SelectorArg {
    Px,
    Pp,
    Xx,
}

impl From<SelectorArg> for PairSelector {
    fn from(s: SelectorArg) -> Self {
        match s {
            SelectorArg::Px => PairSelector::Px,
            SelectorArg::Pp => PairSelector::Pp,
            SelectorArg::Xx => PairSelector::Xx,
        }
    }
}

#[derive(Debug, Args)]
pub struct EllipseArgs {
    #[arg(long)]
    pub v: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub i: i32,
    #[arg(long, allow_hyphen_values = true)]
    pub j: i32,
    #[arg(long, value_enum, default_value = "px")]
    pub selector: SelectorArg,
    #[arg(long, default_value = "0:pi:400")]
    pub grid: String,
    #[arg(long, default_value = "ellipse.csv")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Steady state of the lossy model.
    #[arg(long, conflicts_with_all = ["t_final", "dt"])]
    pub steady: bool,
    /// Evolution time from vacuum (s).
    #[arg(long, requires = "dt")]
    pub t_final: Option<f64>,
    /// Integration step (s).
    #[arg(long, requires = "t_final")]
    pub dt: Option<f64>,
    #[arg(long, default_value = "vsim.csv")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Pump strength grid in units of g_3dB, start:stop:count.
    #[arg(long, default_value = "0:2:50")]
    pub g: String,
    /// Comma-separated loss rates (rad/s).
    #[arg(long)]
    pub gamma: String,
    /// Mode pair i,j; the first resonant pair of the first pump when absent.
    #[arg(long, allow_hyphen_values = true)]
    pub pair: Option<String>,
    /// Evolution time for lossless points (s).
    #[arg(long)]
    pub t_final: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long, default_value = "sweep.csv")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub v: PathBuf,
    #[arg(long)]
    pub cal: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value = "meas.csv")]
    pub output_on: PathBuf,
    #[arg(long, default_value = "meas0.csv")]
    pub output_off: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Overrides the config sample count.
    #[arg(long)]
    pub n_samples: Option<usize>,
}

/// Parses `2`, `-1.5e3`, `pi`, `2pi`, `pi/2` or `3pi/4`.
pub fn parse_number(s: &str) -> Result<f64, CliError> {
    let bad = || CliError::Validation(format!("cannot parse number {s:?}"));
    let t = s.trim();
    let (num, den) = match t.split_once('/') {
        Some((a, b)) => (a, Some(b.parse::<f64>().map_err(|_| bad())?)),
        None => (t, None),
    };
    let v = match num.strip_suffix("pi") {
        Some("") => std::f64::consts::PI,
        Some("-") => -std::f64::consts::PI,
        Some(f) => f.trim_end_matches('*').parse::<f64>().map_err(|_| bad())? * std::f64::consts::PI,
        None => num.parse::<f64>().map_err(|_| bad())?,
    };
    let v = v / den.unwrap_or(1.0);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad())
    }
}

/// `start:stop:count`, inclusive of both ends.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(CliError::Validation(format!("grid must be start:stop:count, got {s:?}")));
    }
    let count: usize =
        parts[2].trim().parse().map_err(|_| CliError::Validation(format!("bad grid count in {s:?}")))?;
    if count == 0 {
        return Err(CliError::Validation("grid count must be positive".into()));
    }
    Ok(linspace(parse_number(parts[0])?, parse_number(parts[1])?, count))
}

pub fn parse_list(s: &str) -> Result<Vec<f64>, CliError> {
    let v: Vec<f64> = s.split(',').filter(|t| !t.trim().is_empty()).map(parse_number).collect::<Result<_, _>>()?;
    if v.is_empty() {
        return Err(CliError::Validation("empty list".into()));
    }
    Ok(v)
}

fn parse_pair(s: &str) -> Result<(i32, i32), CliError> {
    let bad = || CliError::Validation(format!("pair must be i,j, got {s:?}"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

/// Relative paths are resolved against the output directory.
fn out_path(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(d) = &cli.output_dir {
        cfg.paths.output_dir = Some(d.clone());
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn read_cov(cfg: &PipelineConfig, path: &Path) -> Result<CovarianceMatrix, CliError> {
    let (labels, m) = io::read_matrix(path)?;
    Ok(CovarianceMatrix::new(io::basis_for(&cfg.basis()?, labels)?, m)?)
}

fn read_sigma(cfg: &PipelineConfig, path: &Path) -> Result<ErrorMatrix, CliError> {
    let (labels, m) = io::read_matrix(path)?;
    Ok(ErrorMatrix::new(io::basis_for(&cfg.basis()?, labels)?, m)?)
}

fn graphs_for(cfg: &PipelineConfig, graph: Option<&Path>, v: &CovarianceMatrix) -> Result<Vec<qcomb_core::CanonicalGraph>, CliError> {
    match graph {
        Some(p) => io::read_graphs(p),
        None => pipeline::graphs(cfg, v.basis()),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Calibrate(a) => {
            let sweep = io::read_sweep(&a.sweep, a.errors.as_deref())?;
            let weighting = if a.unweighted { FitWeighting::Unweighted } else { FitWeighting::Auto };
            let bw = a.bandwidth.unwrap_or(cfg.bandwidth_hz);
            let z = a.impedance.unwrap_or(cfg.impedance_ohm);
            let cal = fit_planck(&sweep, bw, z, weighting)?;
            io::write_cal(&out_path(&cfg.output_dir(), &a.output), &cfg.hash(), &cal)
        }
        Command::Reconstruct(a) => {
            if let Some(c) = a.cal {
                cfg.paths.cal = Some(c);
            }
            let (meas, meas0) = match (a.meas.or(cfg.paths.meas.clone()), a.meas0.or(cfg.paths.meas0.clone())) {
                (Some(m), Some(m0)) => (m, m0),
                _ => return Err(CliError::Validation("reconstruct needs --meas and --meas0".into())),
            };
            let hash = cfg.hash();
            let dir = cfg.output_dir();
            let m = pipeline::measure_records(&cfg.basis()?, cfg.voltage_scale()?, &meas, &meas0)?;
            let rec = pipeline::reconstruct(&m, &pipeline::load_cal(&cfg)?, &cfg)?;
            let labels = m.vmeas.basis().labels().to_vec();
            io::write_matrix(&dir.join("vmeas.csv"), &hash, &labels, m.vmeas.data())?;
            io::write_matrix(&dir.join("vmeas0.csv"), &hash, &labels, m.vmeas0.data())?;
            io::write_matrix(&dir.join("vquant.csv"), &hash, &labels, rec.vquant.data())?;
            io::write_matrix(&dir.join("sigma.csv"), &hash, &labels, rec.sigma.data())
        }
        Command::Project(a) => {
            if let Some(t) = a.tol {
                cfg.projection.tol_bisect = t;
            }
            if let Some(m) = a.max_iter {
                cfg.projection.max_iter = m;
            }
            cfg.validate()?;
            let vq = read_cov(&cfg, &a.vq)?;
            let sigma = read_sigma(&cfg, &a.sigma)?;
            let p = nearest_physical(&vq, &sigma, &cfg.projection_options())?;
            let hash = cfg.hash();
            let dir = cfg.output_dir();
            io::write_matrix(&dir.join("vphys.csv"), &hash, vq.basis().labels(), p.v.data())?;
            io::write_json(&dir.join("projection.json"), &pipeline::projection_json(&p, &hash))
        }
        Command::Nullifier(a) => {
            let v = read_cov(&cfg, &a.v)?;
            let theta = parse_number(&a.theta)?;
            let gs = graphs_for(&cfg, a.graph.as_deref(), &v)?;
            let sigma = match &a.sigma {
                Some(p) => Some(pipeline::rotate_sigma(&read_sigma(&cfg, p)?, theta)?),
                None => None,
            };
            let report = nullifier_report(&rotate(&v, theta), None, &gs, sigma.as_ref())?;
            io::write_json(&out_path(&cfg.output_dir(), &a.output), &pipeline::report_json(&report, theta, &cfg.hash()))
        }
        Command::Scan(a) => {
            let v = read_cov(&cfg, &a.v)?;
            let gs = graphs_for(&cfg, a.graph.as_deref(), &v)?;
            let scan = theta_scan(&v, &gs, &parse_grid(&a.grid)?)?;
            let path = out_path(&cfg.output_dir(), &a.output);
            io::write_table(&path, &cfg.hash(), &["theta", "mean_db", "std_db"], &pipeline::scan_rows(&scan))
        }
        Command::ScanEllipse(a) => {
            let v = read_cov(&cfg, &a.v)?;
            let rows: Vec<Vec<f64>> = pair_scan(&v, a.i, a.j, a.selector.into(), &parse_grid(&a.grid)?)?
                .into_iter()
                .map(|(t, e)| vec![t, e.smaller, e.larger, e.squeeze_db, e.anti_squeeze_db])
                .collect();
            let path = out_path(&cfg.output_dir(), &a.output);
            io::write_table(&path, &cfg.hash(), &["theta", "eig_min", "eig_max", "db_min", "db_max"], &rows)
        }
        Command::Simulate(a) => {
            let mode = match (a.steady, a.t_final, a.dt) {
                (true, _, _) => SimulateMode::Steady,
                (false, Some(t_final), Some(dt)) => SimulateMode::Evolve { t_final, dt },
                _ => pipeline::default_mode(&cfg)?,
            };
            let v = pipeline::simulate(&cfg, mode)?;
            io::write_matrix(&out_path(&cfg.output_dir(), &a.output), &cfg.hash(), v.basis().labels(), v.data())
        }
        Command::Sweep(a) => run_sweep(&cfg, &a),
        Command::Synth(a) => {
            if let Some(c) = a.cal {
                cfg.paths.cal = Some(c);
            }
            if let Some(n) = a.n {
                cfg.n_samples = n;
            }
            cfg.validate()?;
            let v = read_cov(&cfg, &a.v)?;
            let hash = cfg.hash();
            let dir = cfg.output_dir();
            let mut synth = MeasurementSynth::new(&v, &pipeline::load_cal(&cfg)?, cfg.voltage_scale()?, cfg.seed)?;
            let labels = v.basis().labels();
            let mut on = io::RecordWriter::create(&out_path(&dir, &a.output_on), &hash, labels)?;
            let mut off = io::RecordWriter::create(&out_path(&dir, &a.output_off), &hash, labels)?;
            let mut left = cfg.n_samples;
            while left > 0 {
                let rows = left.min(pipeline::CHUNK_ROWS);
                on.push(&synth.pump_on(rows))?;
                off.push(&synth.pump_off(rows))?;
                left -= rows;
            }
            on.finish()?;
            off.finish()
        }
        Command::Pipeline(a) => {
            if let Some(n) = a.n_samples {
                cfg.n_samples = n;
            }
            cfg.validate()?;
            pipeline::run_pipeline(&cfg, &cfg.output_dir()).map(|_| ())
        }
    }
}

fn run_sweep(cfg: &PipelineConfig, a: &SweepArgs) -> Result<(), CliError> {
    let template = cfg.dynamics_model()?;
    let g_values = parse_grid(&a.g)?;
    let gammas = parse_list(&a.gamma)?;
    if gammas.iter().any(|g| *g < 0.0) {
        return Err(CliError::Validation("loss rates must be >= 0".into()));
    }
    let pair = match &a.pair {
        Some(p) => parse_pair(p)?,
        None => default_pair(cfg)?,
    };
    let (t_default, dt_default) = cfg.evolution_times(&template);
    let t_final = a.t_final.unwrap_or(t_default);
    let opts = SweepOptions { pair, t_final, dt: a.dt.unwrap_or(dt_default.min(t_final / 2000.0)) };
    let grid: Vec<(f64, f64)> = gammas.iter().flat_map(|&gm| g_values.iter().map(move |&g| (g, gm))).collect();
    let rows = grid
        .par_iter()
        .map(|&(g, gamma)| sweep_point(&template, g, gamma, &opts))
        .collect::<Result<Vec<_>, _>>()?;
    let table: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| vec![r.g, r.gamma, r.db_min, r.db_max, r.theta, if r.flagged { 1.0 } else { 0.0 }])
        .collect();
    let path = out_path(&cfg.output_dir(), &a.output);
    io::write_table(&path, &cfg.hash(), &["g", "gamma", "db_min", "db_max", "theta", "flagged"], &table)
}

/// First label pair `(i, k - i)` resonant with the first pump, `i < k - i`.
fn default_pair(cfg: &PipelineConfig) -> Result<(i32, i32), CliError> {
    let basis = cfg.basis()?;
    let k = cfg.pumps.first().map(|p| p.offset_units).ok_or_else(|| CliError::Validation("no pumps configured".into()))?;
    basis
        .labels()
        .iter()
        .map(|&i| (i, k - i))
        .find(|&(i, j)| i < j && basis.contains(j))
        .ok_or_else(|| CliError::Validation("no resonant pair for the first pump".into()))
}

/// Runs with process-style arguments and returns the exit code, printing
/// errors as JSON on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                // --help and --version.
                print!("{e}");
                return 0;
            }
            let msg = e.render().to_string();
            eprintln!("{}", json!({ "error": "validation", "exit_code": 2, "message": msg.trim() }));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn numbers_and_grids() {
        assert_eq!(parse_number("pi").unwrap(), PI);
        assert_eq!(parse_number("2pi").unwrap(), 2.0 * PI);
        assert_eq!(parse_number("3pi/4").unwrap(), 0.75 * PI);
        assert_eq!(parse_number("-1.5e3").unwrap(), -1500.0);
        assert!(parse_number("x").is_err());
        let g = parse_grid("0:pi:400").unwrap();
        assert_eq!((g.len(), g[0], g[399]), (400, 0.0, PI));
        assert!(parse_grid("0:1").is_err());
        assert_eq!(parse_list("0, 1e6,2").unwrap(), vec![0.0, 1e6, 2.0]);
        assert_eq!(parse_pair("-1,1").unwrap(), (-1, 1));
    }

    #[test]
    fn default_pair_uses_first_pump() {
        let cfg = PipelineConfig::default();
        assert_eq!(default_pair(&cfg).unwrap(), (-47, 43));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(main_with_args(["qcomb", "nope"]), 2);
        assert_eq!(main_with_args(["qcomb", "scan"]), 2);
        assert_eq!(main_with_args(["qcomb", "--help"]), 0);
    }
}
