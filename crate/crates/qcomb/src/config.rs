//! Versioned JSON pipeline configuration.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use qcomb_core::calibration::AmplifierChainCal;
use qcomb_core::cluster::{EdgeSigns, PumpConfig, PumpTone};
use qcomb_core::dynamics::DynamicsModel;
use qcomb_core::projection::ProjectionOptions;
use qcomb_core::reconstruction::PropagationRule;
use qcomb_core::{ModeBasis, VoltageScale};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRange {
    pub start: i32,
    pub end: i32,
    #[serde(default = "one")]
    pub step: i32,
}

fn one() -> i32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpSpec {
    pub offset_units: i32,
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub cal: Option<PathBuf>,
    pub meas: Option<PathBuf>,
    pub meas0: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

/// Uniform amplification chain used when no calibration file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmplifierSpec {
    pub gain: f64,
    pub nbar: f64,
}

impl Default for AmplifierSpec {
    fn default() -> Self {
        Self { gain: 100.0, nbar: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSpec {
    /// rad/s.
    pub loss_rate: f64,
    /// rad/s per unit amplitude; `g_3dB` at `loss_rate` when absent.
    pub pump_scale: Option<f64>,
    /// Evolution time (s) for lossless runs; `1 / pump_scale` when absent.
    pub t_final: Option<f64>,
    pub dt: Option<f64>,
}

impl Default for DynamicsSpec {
    fn default() -> Self {
        Self { loss_rate: 2.0 * PI * 1e7, pump_scale: None, t_final: None, dt: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSpec {
    pub tol_bisect: f64,
    pub feas_tol: f64,
    pub max_iter: usize,
}

/// Defaults are looser than the library's so that a 95-mode projection
/// finishes in under a minute.
impl Default for ProjectionSpec {
    fn default() -> Self {
        Self { tol_bisect: 1e-2, feas_tol: ProjectionOptions::default().feas_tol, max_iter: 100 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSignSpec {
    #[default]
    PumpPhase,
    Ladder,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationSpec {
    #[default]
    Linearized,
    RowGain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "version")]
    pub version: u32,
    pub omega0_hz: f64,
    pub delta_hz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<i32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_range: Option<LabelRange>,
    pub pumps: Vec<PumpSpec>,
    pub impedance_ohm: f64,
    /// Measurement bandwidth (Hz).
    pub bandwidth_hz: f64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "n_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub amplifier: AmplifierSpec,
    #[serde(default)]
    pub dynamics: DynamicsSpec,
    #[serde(default)]
    pub projection: ProjectionSpec,
    #[serde(default)]
    pub edge_signs: EdgeSignSpec,
    #[serde(default)]
    pub propagation: PropagationSpec,
}

fn version() -> u32 {
    CONFIG_VERSION
}

fn n_samples() -> usize {
    1_000_000
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            omega0_hz: 4.2e9,
            delta_hz: 1e6,
            labels: None,
            label_range: Some(LabelRange { start: -47, end: 47, step: 1 }),
            pumps: vec![
                PumpSpec { offset_units: -4, amplitude: 0.3, phase: PI },
                PumpSpec { offset_units: 0, amplitude: 0.3, phase: 0.0 },
                PumpSpec { offset_units: 4, amplitude: 0.3, phase: 0.0 },
            ],
            impedance_ohm: 50.0,
            bandwidth_hz: 1e5,
            paths: Paths::default(),
            seed: 0,
            n_samples: n_samples(),
            amplifier: AmplifierSpec::default(),
            dynamics: DynamicsSpec::default(),
            projection: ProjectionSpec::default(),
            edge_signs: EdgeSignSpec::default(),
            propagation: PropagationSpec::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(invalid(format!("unsupported config version {}", self.version)));
        }
        for (name, v) in [
            ("omega0_hz", self.omega0_hz),
            ("delta_hz", self.delta_hz),
            ("impedance_ohm", self.impedance_ohm),
            ("bandwidth_hz", self.bandwidth_hz),
            ("amplifier.gain", self.amplifier.gain),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.amplifier.nbar >= 0.0 && self.amplifier.nbar.is_finite()) {
            return Err(invalid(format!("amplifier.nbar must be >= 0, got {}", self.amplifier.nbar)));
        }
        if self.labels.is_some() == self.label_range.is_some() {
            return Err(invalid("exactly one of labels and label_range must be given"));
        }
        if self.n_samples < 2 {
            return Err(invalid(format!("n_samples must be >= 2, got {}", self.n_samples)));
        }
        let p = &self.projection;
        if !(p.tol_bisect > 0.0 && p.feas_tol >= 0.0 && p.max_iter > 0) {
            return Err(invalid("projection options must be positive"));
        }
        let paths: Vec<&PathBuf> =
            [&self.paths.cal, &self.paths.meas, &self.paths.meas0, &self.paths.output_dir].into_iter().flatten().collect();
        let distinct: BTreeSet<&PathBuf> = paths.iter().copied().collect();
        if distinct.len() != paths.len() {
            return Err(invalid("paths must be distinct"));
        }
        self.basis()?;
        self.pump_config()?;
        self.dynamics_model()?;
        Ok(())
    }

    pub fn label_list(&self) -> Result<Vec<i32>, CliError> {
        match (&self.labels, &self.label_range) {
            (Some(l), None) => Ok(l.clone()),
            (None, Some(r)) => {
                if r.step <= 0 || r.end < r.start {
                    return Err(invalid("label_range needs start <= end and step > 0"));
                }
                Ok((r.start..=r.end).step_by(r.step as usize).collect())
            }
            _ => Err(invalid("exactly one of labels and label_range must be given")),
        }
    }

    pub fn basis(&self) -> Result<ModeBasis, CliError> {
        Ok(ModeBasis::new(2.0 * PI * self.omega0_hz, 2.0 * PI * self.delta_hz, self.label_list()?)?)
    }

    pub fn pump_config(&self) -> Result<PumpConfig, CliError> {
        Ok(PumpConfig::new(
            self.pumps.iter().map(|p| PumpTone::new(p.offset_units, p.amplitude, p.phase)).collect(),
        )?)
    }

    pub fn voltage_scale(&self) -> Result<VoltageScale, CliError> {
        Ok(VoltageScale::new(self.impedance_ohm, 2.0 * PI * self.bandwidth_hz)?)
    }

    pub fn edge_signs(&self) -> EdgeSigns {
        match self.edge_signs {
            EdgeSignSpec::PumpPhase => EdgeSigns::PumpPhase,
            EdgeSignSpec::Ladder => EdgeSigns::Ladder,
        }
    }

    pub fn propagation_rule(&self) -> PropagationRule {
        match self.propagation {
            PropagationSpec::Linearized => PropagationRule::Linearized,
            PropagationSpec::RowGain => PropagationRule::RowGain,
        }
    }

    pub fn projection_options(&self) -> ProjectionOptions {
        ProjectionOptions {
            tol_bisect: self.projection.tol_bisect,
            feas_tol: self.projection.feas_tol,
            max_iter: self.projection.max_iter,
        }
    }

    pub fn dynamics_model(&self) -> Result<DynamicsModel, CliError> {
        let d = &self.dynamics;
        let scale = match d.pump_scale {
            Some(s) => s,
            None => qcomb_core::dynamics::coupling_3db(d.loss_rate)?,
        };
        Ok(DynamicsModel::new(self.basis()?, self.pump_config()?, d.loss_rate, scale)?)
    }

    /// Lossless evolution time and step.
    pub fn evolution_times(&self, model: &DynamicsModel) -> (f64, f64) {
        let t = self.dynamics.t_final.unwrap_or(1.0 / model.pump_scale);
        (t, self.dynamics.dt.unwrap_or(t / 2000.0))
    }

    pub fn uniform_cal(&self) -> Result<AmplifierChainCal, CliError> {
        Ok(AmplifierChainCal::uniform(&self.basis()?, self.amplifier.gain, self.amplifier.nbar)?)
    }

    /// SHA-256 of the canonical JSON form. The output directory is left out
    /// so that identical runs written to different places match.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.output_dir = None;
        let canonical = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}
