//! Canonical graphs of a multi-pump scheme and nullifier statistics.
//!
//! A tone at `2 w0 + k Δ` correlates every mode pair with `i + j = k`. Each
//! connected component of that pair graph is one cluster state whose
//! nullifiers are `N_i = p_i - Σ_j h_ij x_j`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::basis::{ModeBasis, Quadrature};
use crate::covariance::{CovarianceMatrix, MeanVector};
use crate::error::{Error, Result};
use crate::gaussian::rotate;
use crate::math::{cos, db, sqrt};
use crate::reconstruction::ErrorMatrix;
use crate::VACUUM_VARIANCE;

/// One pump tone at `2 w0 + offset_units Δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PumpTone {
    pub offset_units: i32,
    /// Pump strength in units of `g_3dB`.
    pub amplitude: f64,
    /// Radians.
    pub phase: f64,
}

impl PumpTone {
    pub fn new(offset_units: i32, amplitude: f64, phase: f64) -> Self {
        Self { offset_units, amplitude, phase }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PumpConfig {
    tones: Vec<PumpTone>,
}

impl PumpConfig {
    pub fn new(tones: Vec<PumpTone>) -> Result<Self> {
        for t in &tones {
            if !t.amplitude.is_finite() || !t.phase.is_finite() {
                return Err(Error::NonFinite);
            }
            if t.amplitude < 0.0 {
                return Err(Error::InvalidArgument(format!("pump amplitude must be >= 0, got {}", t.amplitude)));
            }
        }
        let mut offsets: Vec<i32> = tones.iter().map(|t| t.offset_units).collect();
        offsets.sort_unstable();
        if offsets.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("pump offsets must be distinct".into()));
        }
        Ok(Self { tones })
    }

    /// Tones at `2 w0 - 4Δ`, `2 w0`, `2 w0 + 4Δ` with phases `π, 0, 0`.
    pub fn three_pump(amplitude: f64) -> Self {
        Self::new(alloc::vec![
            PumpTone::new(-4, amplitude, core::f64::consts::PI),
            PumpTone::new(0, amplitude, 0.0),
            PumpTone::new(4, amplitude, 0.0),
        ])
        .expect("valid three-pump scheme")
    }

    pub fn single(amplitude: f64, phase: f64) -> Self {
        Self::new(alloc::vec![PumpTone::new(0, amplitude, phase)]).expect("valid single pump")
    }

    pub fn tones(&self) -> &[PumpTone] {
        &self.tones
    }

    /// Copy with every amplitude replaced by `amplitude`.
    pub fn with_amplitude(&self, amplitude: f64) -> Result<Self> {
        Self::new(self.tones.iter().map(|t| PumpTone { amplitude, ..*t }).collect())
    }

    /// Copy with every amplitude multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.tones.iter().map(|t| PumpTone { amplitude: t.amplitude * factor, ..*t }).collect())
    }

    /// Copy with every phase shifted by `delta`.
    pub fn with_phase_shift(&self, delta: f64) -> Self {
        Self { tones: self.tones.iter().map(|t| PumpTone { phase: t.phase + delta, ..*t }).collect() }
    }
}

/// Rule assigning the edge weight `h_ij` from the tone that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EdgeSigns {
    /// `h = -cos(φ_k)`: the weight under which a tone of phase `φ_k`
    /// squeezes `p_i - h x_j` in the simulation frame.
    #[default]
    PumpPhase,
    /// Fixed table of the three-pump square ladder: `+1` for positive
    /// offsets and `-1` otherwise, independent of phase.
    Ladder,
}

impl EdgeSigns {
    fn weight(self, tone: &PumpTone) -> f64 {
        match self {
            EdgeSigns::PumpPhase => {
                let h = -cos(tone.phase);
                // Quadrature-phase pumps give h = 0; keep the sign only.
                if h.abs() < 1e-12 {
                    -1.0
                } else {
                    h
                }
            }
            EdgeSigns::Ladder => {
                if tone.offset_units > 0 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

/// Nullifier graph: nodes and weighted symmetric neighbor lists.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalGraph {
    nodes: Vec<i32>,
    neighbors: BTreeMap<i32, Vec<(i32, f64)>>,
}

impl CanonicalGraph {
    /// Builds from undirected edges `(i, j, h)`. Every endpoint must be in
    /// `nodes`; weights must be finite and nonzero.
    pub fn new(mut nodes: Vec<i32>, edges: &[(i32, i32, f64)]) -> Result<Self> {
        nodes.sort_unstable();
        nodes.dedup();
        if nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let mut neighbors: BTreeMap<i32, Vec<(i32, f64)>> = nodes.iter().map(|&n| (n, Vec::new())).collect();
        for &(i, j, h) in edges {
            if !(h.is_finite() && h != 0.0) {
                return Err(Error::InvalidArgument(format!("edge ({i},{j}) has invalid weight {h}")));
            }
            if i == j {
                return Err(Error::InvalidArgument(format!("self edge at node {i}")));
            }
            for (a, b) in [(i, j), (j, i)] {
                let list = neighbors.get_mut(&a).ok_or(Error::UnknownLabel(a))?;
                if list.iter().any(|(n, _)| *n == b) {
                    return Err(Error::InvalidArgument(format!("duplicate edge ({i},{j})")));
                }
                list.push((b, h));
            }
        }
        for list in neighbors.values_mut() {
            list.sort_by_key(|(n, _)| *n);
        }
        Ok(Self { nodes, neighbors })
    }

    pub fn nodes(&self) -> &[i32] {
        &self.nodes
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, node: i32) -> bool {
        self.neighbors.contains_key(&node)
    }

    /// `(j, h_ij)` sorted by `j`.
    pub fn neighbors(&self, node: i32) -> Result<&[(i32, f64)]> {
        self.neighbors.get(&node).map(|v| v.as_slice()).ok_or(Error::UnknownLabel(node))
    }

    /// Undirected edges `(i, j, h)` with `i < j`.
    pub fn edges(&self) -> Vec<(i32, i32, f64)> {
        let mut out = Vec::new();
        for (&i, list) in &self.neighbors {
            for &(j, h) in list {
                if i < j {
                    out.push((i, j, h));
                }
            }
        }
        out
    }

    /// Same graph with every weight negated.
    pub fn flipped(&self) -> Self {
        Self {
            nodes: self.nodes.clone(),
            neighbors: self
                .neighbors
                .iter()
                .map(|(&k, v)| (k, v.iter().map(|&(j, h)| (j, -h)).collect()))
                .collect(),
        }
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Connected components of the resonant pair graph, ordered by their
/// smallest label. Modes without any partner are dropped; the degenerate
/// self-pair `i = j = k/2` never forms an edge.
pub fn build_graphs(pumps: &PumpConfig, basis: &ModeBasis, signs: EdgeSigns) -> Result<Vec<CanonicalGraph>> {
    let labels = basis.labels();
    let mut edges: Vec<(i32, i32, f64)> = Vec::new();
    for tone in pumps.tones().iter().filter(|t| t.amplitude > 0.0) {
        let h = signs.weight(tone);
        for &i in labels {
            let j = tone.offset_units - i;
            if i < j && basis.contains(j) {
                edges.push((i, j, h));
            }
        }
    }
    if edges.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let mut parent: Vec<usize> = (0..labels.len()).collect();
    for &(i, j, _) in &edges {
        let a = find(&mut parent, basis.position(i).expect("label in basis"));
        let b = find(&mut parent, basis.position(j).expect("label in basis"));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    type Edge = (i32, i32, f64);
    let mut groups: BTreeMap<usize, (Vec<i32>, Vec<Edge>)> = BTreeMap::new();
    for &(i, j, h) in &edges {
        let root = find(&mut parent, basis.position(i).expect("label in basis"));
        groups.entry(root).or_default().1.push((i, j, h));
    }
    for (pos, &l) in labels.iter().enumerate() {
        let root = find(&mut parent, pos);
        if let Some(g) = groups.get_mut(&root) {
            g.0.push(l);
        }
    }
    groups.into_values().map(|(nodes, e)| CanonicalGraph::new(nodes, &e)).collect()
}

/// `⟨p_i⟩ - Σ_j h_ij ⟨x_j⟩`.
pub fn nullifier_mean(m: &MeanVector, graph: &CanonicalGraph, i: i32) -> Result<f64> {
    let mut out = m.get(i, Quadrature::P)?;
    for &(j, h) in graph.neighbors(i)? {
        out -= h * m.get(j, Quadrature::X)?;
    }
    Ok(out)
}

/// `V[p_i,p_i] + Σ_jk h_ij h_ik V[x_j,x_k] - 2 Σ_j h_ij V[p_i,x_j]`.
pub fn nullifier_variance(v: &CovarianceMatrix, graph: &CanonicalGraph, i: i32) -> Result<f64> {
    let nb = graph.neighbors(i)?;
    let b = v.basis();
    let d = v.data();
    let pi = b.index_of(i, Quadrature::P)?;
    let xs: Vec<(usize, f64)> = nb.iter().map(|&(j, h)| Ok((b.index_of(j, Quadrature::X)?, h))).collect::<Result<_>>()?;
    let mut out = d[(pi, pi)];
    for &(xj, hj) in &xs {
        out -= 2.0 * hj * d[(pi, xj)];
        for &(xk, hk) in &xs {
            out += hj * hk * d[(xj, xk)];
        }
    }
    Ok(out)
}

/// Nullifier variance of the vacuum, `(1 + Σ_j h_ij^2) / 2`.
pub fn vacuum_nullifier_variance(graph: &CanonicalGraph, i: i32) -> Result<f64> {
    Ok(VACUUM_VARIANCE * (1.0 + graph.neighbors(i)?.iter().map(|(_, h)| h * h).sum::<f64>()))
}

/// Uncertainty of the nullifier variance from element uncertainties of `V`:
/// squares of the same coefficients that build the variance, with the
/// `p_i` row standing for the mode's momentum quadrature.
pub fn nullifier_variance_sigma(sigma: &ErrorMatrix, graph: &CanonicalGraph, i: i32) -> Result<f64> {
    let nb = graph.neighbors(i)?;
    let b = sigma.basis();
    let s = sigma.data();
    let pi = b.index_of(i, Quadrature::P)?;
    let xs: Vec<(usize, f64)> = nb.iter().map(|&(j, h)| Ok((b.index_of(j, Quadrature::X)?, h))).collect::<Result<_>>()?;
    let mut var = s[(pi, pi)] * s[(pi, pi)];
    for &(xj, hj) in &xs {
        var += hj * hj * (s[(pi, xj)] * s[(pi, xj)] + s[(xj, pi)] * s[(xj, pi)]);
        for &(xk, hk) in &xs {
            var += (hj * hk) * (hj * hk) * s[(xj, xk)] * s[(xj, xk)];
        }
    }
    Ok(sqrt(var))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeNullifier {
    pub node: i32,
    pub mean: f64,
    pub variance: f64,
    pub vacuum_variance: f64,
    /// `10 log10(variance / vacuum_variance)`.
    pub db: f64,
    pub sigma_variance: f64,
    /// First-order uncertainty of `db`.
    pub sigma_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NullifierReport {
    pub nodes: Vec<NodeNullifier>,
    /// Unweighted mean of `db` over all nodes.
    pub mean_db: f64,
    /// Population standard deviation of `db` over all nodes.
    pub std_db: f64,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, sqrt(var))
}

/// Per-node nullifier statistics over every node of every graph.
pub fn nullifier_report(
    v: &CovarianceMatrix,
    mean: Option<&MeanVector>,
    graphs: &[CanonicalGraph],
    sigma: Option<&ErrorMatrix>,
) -> Result<NullifierReport> {
    if graphs.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let mut nodes = Vec::new();
    for g in graphs {
        for &i in g.nodes() {
            let variance = nullifier_variance(v, g, i)?;
            let vacuum_variance = vacuum_nullifier_variance(g, i)?;
            let sigma_variance = match sigma {
                Some(s) => nullifier_variance_sigma(s, g, i)?,
                None => 0.0,
            };
            nodes.push(NodeNullifier {
                node: i,
                mean: match mean {
                    Some(m) => nullifier_mean(m, g, i)?,
                    None => 0.0,
                },
                variance,
                vacuum_variance,
                db: if variance > 0.0 { db(variance / vacuum_variance) } else { f64::NAN },
                sigma_variance,
                sigma_db: 10.0 / core::f64::consts::LN_10 * sigma_variance / variance.abs(),
            });
        }
    }
    let (mean_db, std_db) = mean_std(nodes.iter().map(|n| n.db));
    Ok(NullifierReport { nodes, mean_db, std_db })
}

/// Replaces each graph by its sign-flipped copy when that gives the lower
/// mean nullifier ratio on `v`.
pub fn resolve_global_sign(v: &CovarianceMatrix, graphs: &[CanonicalGraph]) -> Result<Vec<CanonicalGraph>> {
    graphs
        .iter()
        .map(|g| {
            let f = g.flipped();
            let a = nullifier_report(v, None, core::slice::from_ref(g), None)?.mean_db;
            let b = nullifier_report(v, None, core::slice::from_ref(&f), None)?.mean_db;
            Ok(if b < a { f } else { g.clone() })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPoint {
    pub theta: f64,
    pub mean_db: f64,
    pub std_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaScan {
    pub points: Vec<ScanPoint>,
    /// Grid angle of the lowest mean dB (first one on ties).
    pub best_theta: f64,
    pub best_mean_db: f64,
}

/// Absolute dB difference below which two scan points are tied.
pub const SCAN_TIE_TOL: f64 = 1e-12;

/// Aggregate nullifier dB after rotating every mode by each grid angle.
pub fn theta_scan(v: &CovarianceMatrix, graphs: &[CanonicalGraph], grid: &[f64]) -> Result<ThetaScan> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty theta grid".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &theta in grid {
        let r = nullifier_report(&rotate(v, theta), None, graphs, None)?;
        points.push(ScanPoint { theta, mean_db: r.mean_db, std_db: r.std_db });
    }
    let mut best = 0;
    for (k, p) in points.iter().enumerate() {
        // Values within rounding of the incumbent count as ties.
        if p.mean_db < points[best].mean_db - SCAN_TIE_TOL {
            best = k;
        }
    }
    Ok(ThetaScan { best_theta: points[best].theta, best_mean_db: points[best].mean_db, points })
}
