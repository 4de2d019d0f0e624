//! Frequency-comb mode bookkeeping.
//!
//! Every module maps (mode label, quadrature) pairs to matrix indices through
//! [`quadrature_index`]; nothing else in the crate computes `2 * pos + 1` by
//! hand.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// One of the two canonical quadratures of a mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Quadrature {
    X,
    P,
}

/// Index of quadrature `q` of the mode at basis position `position` in the
/// packed `(x, p)` ordering.
#[inline]
pub const fn quadrature_index(position: usize, q: Quadrature) -> usize {
    match q {
        Quadrature::X => 2 * position,
        Quadrature::P => 2 * position + 1,
    }
}

/// A comb of modes at `center + label * spacing` (angular frequencies).
///
/// Labels are strictly increasing but need not be contiguous, so partial
/// combs such as odd-only labels are represented directly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeBasis {
    center_frequency: f64,
    spacing: f64,
    labels: Vec<i32>,
}

impl ModeBasis {
    pub fn new(center_frequency: f64, spacing: f64, labels: Vec<i32>) -> Result<Self> {
        if !center_frequency.is_finite() || !spacing.is_finite() {
            return Err(Error::NonFinite);
        }
        if spacing <= 0.0 {
            return Err(Error::InvalidBasis(format!("spacing must be positive, got {spacing}")));
        }
        if labels.is_empty() {
            return Err(Error::InvalidBasis("empty label list".into()));
        }
        if let Some(w) = labels.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::InvalidBasis(format!(
                "labels must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        let lowest = center_frequency + f64::from(labels[0]) * spacing;
        if lowest <= 0.0 {
            return Err(Error::InvalidBasis(format!(
                "mode {} has non-positive frequency {lowest}",
                labels[0]
            )));
        }
        Ok(Self { center_frequency, spacing, labels })
    }

    /// Contiguous comb with labels `-half_width..=half_width`.
    pub fn symmetric(center_frequency: f64, spacing: f64, half_width: i32) -> Result<Self> {
        Self::new(center_frequency, spacing, (-half_width..=half_width).collect())
    }

    /// Odd-only comb with `count` modes placed symmetrically: `±1, ±3, ...`.
    /// `count` must be even.
    pub fn odd(center_frequency: f64, spacing: f64, count: usize) -> Result<Self> {
        if count == 0 || count % 2 != 0 {
            return Err(Error::InvalidBasis(format!("odd comb needs an even mode count, got {count}")));
        }
        let half = (count / 2) as i32;
        let mut labels: Vec<i32> = (0..half).map(|k| -(2 * (half - k) - 1)).collect();
        labels.extend((0..half).map(|k| 2 * k + 1));
        Self::new(center_frequency, spacing, labels)
    }

    pub fn center_frequency(&self) -> f64 {
        self.center_frequency
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn n_modes(&self) -> usize {
        self.labels.len()
    }

    /// Dimension of the quadrature vector, `2 * n_modes`.
    pub fn dim(&self) -> usize {
        2 * self.labels.len()
    }

    pub fn contains(&self, label: i32) -> bool {
        self.position(label).is_some()
    }

    pub fn position(&self, label: i32) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }

    pub fn position_of(&self, label: i32) -> Result<usize> {
        self.position(label).ok_or(Error::UnknownLabel(label))
    }

    /// Matrix index of quadrature `q` of mode `label`.
    pub fn index_of(&self, label: i32, q: Quadrature) -> Result<usize> {
        Ok(quadrature_index(self.position_of(label)?, q))
    }

    /// Angular frequency of mode `label` (which need not be in the basis).
    pub fn frequency(&self, label: i32) -> f64 {
        self.center_frequency + f64::from(label) * self.spacing
    }

    /// Angular frequency of the mode at basis position `position`.
    pub fn frequency_at(&self, position: usize) -> f64 {
        self.frequency(self.labels[position])
    }

    /// Mode position owning quadrature index `index`.
    #[inline]
    pub fn mode_of_index(index: usize) -> usize {
        index / 2
    }

    /// Restriction of this basis to `labels` (which must all be present).
    pub fn subset(&self, labels: &[i32]) -> Result<Self> {
        let mut sorted = labels.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &l in &sorted {
            self.position_of(l)?;
        }
        Self::new(self.center_frequency, self.spacing, sorted)
    }
}
