//! CSV and JSON file formats.
//!
//! Every CSV starts with `# config-hash: <sha256>` and may carry further `#`
//! comment lines; readers skip all of them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use qcomb_core::calibration::NoiseSweep;
use qcomb_core::{AmplifierChainCal, CalRecord, CanonicalGraph, ModeBasis};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn csv_writer(path: &Path, hash: &str) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    let mut w = create(path)?;
    writeln!(w, "# config-hash: {hash}").map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(w))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<BufReader<File>>, CliError> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(BufReader::new(f)))
}

fn parse_f64(path: &Path, s: &str) -> Result<f64, CliError> {
    s.parse().map_err(|_| CliError::Validation(format!("{}: not a number: {s:?}", path.display())))
}

fn finish_csv(path: &Path, w: csv::Writer<BufWriter<File>>) -> Result<(), CliError> {
    let mut inner = w.into_inner().map_err(|e| CliError::io(path, e))?;
    inner.flush().map_err(|e| CliError::io(path, e))
}

/// Quadrature column names: `x-1,p-1,x1,p1,...`.
pub fn quadrature_header(labels: &[i32]) -> Vec<String> {
    labels.iter().flat_map(|l| [format!("x{l}"), format!("p{l}")]).collect()
}

fn labels_from_header(path: &Path, header: &csv::StringRecord) -> Result<Vec<i32>, CliError> {
    let bad = || CliError::Validation(format!("{}: header must be x<label>,p<label>,...", path.display()));
    let cols: Vec<&str> = header.iter().collect();
    if cols.is_empty() || cols.len() % 2 != 0 {
        return Err(bad());
    }
    cols.chunks(2)
        .map(|c| {
            let (x, p) = (c[0].strip_prefix('x'), c[1].strip_prefix('p'));
            match (x, p) {
                (Some(a), Some(b)) if a == b => a.parse().map_err(|_| bad()),
                _ => Err(bad()),
            }
        })
        .collect()
}

/// Square quadrature matrix (covariance or its uncertainties).
pub fn write_matrix(path: &Path, hash: &str, labels: &[i32], m: &DMatrix<f64>) -> Result<(), CliError> {
    let mut w = csv_writer(path, hash)?;
    let io = |e: csv::Error| CliError::io(path, e);
    w.write_record(quadrature_header(labels)).map_err(io)?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(io)?;
    }
    finish_csv(path, w)
}

pub fn read_matrix(path: &Path) -> Result<(Vec<i32>, DMatrix<f64>), CliError> {
    let mut r = csv_reader(path)?;
    let labels = labels_from_header(path, r.headers().map_err(|e| CliError::io(path, e))?)?;
    let dim = 2 * labels.len();
    let mut data = Vec::with_capacity(dim * dim);
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        for s in rec.iter() {
            data.push(parse_f64(path, s)?);
        }
        rows += 1;
    }
    if rows != dim {
        return Err(CliError::Validation(format!("{}: expected {dim} rows, found {rows}", path.display())));
    }
    Ok((labels, DMatrix::from_row_slice(dim, dim, &data)))
}

/// Basis for a file's labels with the configured comb frequencies.
pub fn basis_for(template: &ModeBasis, labels: Vec<i32>) -> Result<ModeBasis, CliError> {
    Ok(ModeBasis::new(template.center_frequency(), template.spacing(), labels)?)
}

/// Streaming writer for quadrature sample records (volts).
pub struct RecordWriter {
    path: std::path::PathBuf,
    w: csv::Writer<BufWriter<File>>,
}

impl RecordWriter {
    pub fn create(path: &Path, hash: &str, labels: &[i32]) -> Result<Self, CliError> {
        let mut w = csv_writer(path, hash)?;
        w.write_record(quadrature_header(labels)).map_err(|e| CliError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), w })
    }

    pub fn push(&mut self, chunk: &DMatrix<f64>) -> Result<(), CliError> {
        for row in chunk.row_iter() {
            self.w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| CliError::io(&self.path, e))?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<(), CliError> {
        finish_csv(&self.path, self.w)
    }
}

/// Reads a sample record in chunks of `chunk_rows`, calling `f` on each.
pub fn read_records(
    path: &Path,
    chunk_rows: usize,
    mut f: impl FnMut(&DMatrix<f64>),
) -> Result<(Vec<i32>, usize), CliError> {
    let mut r = csv_reader(path)?;
    let labels = labels_from_header(path, r.headers().map_err(|e| CliError::io(path, e))?)?;
    let dim = 2 * labels.len();
    let mut buf = Vec::with_capacity(chunk_rows * dim);
    let mut total = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        if rec.len() != dim {
            return Err(CliError::Validation(format!("{}: row {} has {} columns", path.display(), total + 1, rec.len())));
        }
        for s in rec.iter() {
            buf.push(parse_f64(path, s)?);
        }
        total += 1;
        if buf.len() == chunk_rows * dim {
            f(&DMatrix::from_row_slice(chunk_rows, dim, &buf));
            buf.clear();
        }
    }
    if !buf.is_empty() {
        f(&DMatrix::from_row_slice(buf.len() / dim, dim, &buf));
    }
    Ok((labels, total))
}

pub const CAL_HEADER: [&str; 6] = ["frequency_hz", "gain", "nbar", "sigma_gain", "sigma_nbar", "cov_gain_nbar"];

pub fn write_cal(path: &Path, hash: &str, cal: &AmplifierChainCal) -> Result<(), CliError> {
    let mut w = csv_writer(path, hash)?;
    let io = |e: csv::Error| CliError::io(path, e);
    w.write_record(CAL_HEADER).map_err(io)?;
    for r in cal.records() {
        let vals = [r.frequency_hz, r.gain, r.nbar, r.sigma_gain, r.sigma_nbar, r.cov_gain_nbar];
        w.write_record(vals.iter().map(|v| v.to_string())).map_err(io)?;
    }
    finish_csv(path, w)
}

pub fn read_cal(path: &Path) -> Result<AmplifierChainCal, CliError> {
    let mut r = csv_reader(path)?;
    let header = r.headers().map_err(|e| CliError::io(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != CAL_HEADER {
        return Err(CliError::Validation(format!("{}: expected header {}", path.display(), CAL_HEADER.join(","))));
    }
    let mut records = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let v: Vec<f64> = rec.iter().map(|s| parse_f64(path, s)).collect::<Result<_, _>>()?;
        if v.len() != 6 {
            return Err(CliError::Validation(format!("{}: calibration rows need 6 columns", path.display())));
        }
        records.push(CalRecord {
            frequency_hz: v[0],
            gain: v[1],
            nbar: v[2],
            sigma_gain: v[3],
            sigma_nbar: v[4],
            cov_gain_nbar: v[5],
            nbar_clamped: false,
        });
    }
    Ok(AmplifierChainCal::new(records)?)
}

/// Frequencies, temperatures and the variance table.
type SweepTable = (Vec<f64>, Vec<f64>, DMatrix<f64>);

/// Temperature rows by frequency columns: `temperature_k,<f1>,<f2>,...`.
fn read_sweep_table(path: &Path) -> Result<SweepTable, CliError> {
    let mut r = csv_reader(path)?;
    let header = r.headers().map_err(|e| CliError::io(path, e))?.clone();
    if header.get(0) != Some("temperature_k") || header.len() < 2 {
        return Err(CliError::Validation(format!("{}: header must be temperature_k,<freq_hz>...", path.display())));
    }
    let freqs: Vec<f64> = header.iter().skip(1).map(|s| parse_f64(path, s)).collect::<Result<_, _>>()?;
    let mut temps = Vec::new();
    let mut cells = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        if rec.len() != freqs.len() + 1 {
            return Err(CliError::Validation(format!("{}: ragged row", path.display())));
        }
        temps.push(parse_f64(path, &rec[0])?);
        for s in rec.iter().skip(1) {
            cells.push(parse_f64(path, s)?);
        }
    }
    let m = DMatrix::from_row_slice(temps.len(), freqs.len(), &cells);
    Ok((freqs, temps, m))
}

pub fn read_sweep(path: &Path, errors: Option<&Path>) -> Result<NoiseSweep, CliError> {
    let (freqs, temps, var) = read_sweep_table(path)?;
    let err = match errors {
        Some(p) => {
            let (f2, t2, e) = read_sweep_table(p)?;
            if f2 != freqs || t2 != temps {
                return Err(CliError::Validation(format!("{}: axes differ from {}", p.display(), path.display())));
            }
            Some(e)
        }
        None => None,
    };
    Ok(NoiseSweep::new(freqs, temps, var, err)?)
}

pub fn write_sweep(path: &Path, hash: &str, sweep: &NoiseSweep) -> Result<(), CliError> {
    let mut w = csv_writer(path, hash)?;
    let io = |e: csv::Error| CliError::io(path, e);
    let mut header = vec!["temperature_k".to_string()];
    header.extend(sweep.frequencies().iter().map(|f| f.to_string()));
    w.write_record(header).map_err(io)?;
    for (k, t) in sweep.temperatures().iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(sweep.variances().row(k).iter().map(|v| v.to_string()));
        w.write_record(row).map_err(io)?;
    }
    finish_csv(path, w)
}

/// Generic table with a header and numeric rows.
pub fn write_table(path: &Path, hash: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<(), CliError> {
    let mut w = csv_writer(path, hash)?;
    let io = |e: csv::Error| CliError::io(path, e);
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(io)?;
    }
    finish_csv(path, w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeJson {
    pub i: i32,
    pub j: i32,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphJson {
    pub nodes: Vec<i32>,
    pub edges: Vec<EdgeJson>,
}

impl GraphJson {
    pub fn from_graph(g: &CanonicalGraph) -> Self {
        Self {
            nodes: g.nodes().to_vec(),
            edges: g.edges().into_iter().map(|(i, j, h)| EdgeJson { i, j, h }).collect(),
        }
    }

    pub fn to_graph(&self) -> Result<CanonicalGraph, CliError> {
        let edges: Vec<(i32, i32, f64)> = self.edges.iter().map(|e| (e.i, e.j, e.h)).collect();
        Ok(CanonicalGraph::new(self.nodes.clone(), &edges)?)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum GraphFile {
    One(GraphJson),
    Many(Vec<GraphJson>),
}

/// A graph file holds one graph object or an array of them.
pub fn read_graphs(path: &Path) -> Result<Vec<CanonicalGraph>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parsed: GraphFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    match parsed {
        GraphFile::One(g) => Ok(vec![g.to_graph()?]),
        GraphFile::Many(gs) => gs.iter().map(GraphJson::to_graph).collect(),
    }
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut w = create(path)?;
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    writeln!(w, "{text}").map_err(|e| CliError::io(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}
