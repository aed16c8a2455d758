//! Torus geometry: resolution, signed wavevector tables, dealias mask.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Geometry of the periodic box and its spectral representation.
///
/// Index `m` on an axis with `n` points and period `L` carries the physical
/// wavevector `(2*pi/L) * m'` where `m'` is the signed alias of `m` in
/// `[-n/2, n/2)`. Modes with `|m'| > dealias_fraction * n/2` on any axis are
/// masked by [`crate::field::SpectralField::dealias`], together with the
/// Nyquist row `m' = -n/2` which has no conjugate partner under
/// differentiation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    n: [usize; 3],
    lengths: [f64; 3],
    dealias_fraction: f64,
    #[serde(skip)]
    tables: Tables,
}

impl PartialEq for GridSpec {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
            && self.lengths == other.lengths
            && self.dealias_fraction == other.dealias_fraction
    }
}

#[derive(Debug, Clone, Default)]
struct Tables {
    wavenumbers: [Vec<f64>; 3],
    keep: [Vec<bool>; 3],
}

impl GridSpec {
    /// Build a grid, precomputing wavevector tables and the dealias mask.
    pub fn new(n: [usize; 3], lengths: [f64; 3], dealias_fraction: f64) -> Result<Arc<Self>> {
        for (axis, &ni) in n.iter().enumerate() {
            if ni < 8 || ni % 2 != 0 {
                return Err(Error::InvalidGrid(format!(
                    "axis {axis}: n = {ni} must be even and at least 8"
                )));
            }
        }
        for (axis, &li) in lengths.iter().enumerate() {
            if !(li > 0.0) || !li.is_finite() {
                return Err(Error::InvalidGrid(format!(
                    "axis {axis}: length = {li} must be positive and finite"
                )));
            }
        }
        if !(dealias_fraction > 0.0 && dealias_fraction <= 1.0) {
            return Err(Error::InvalidGrid(format!(
                "dealias_fraction = {dealias_fraction} must lie in (0, 1]"
            )));
        }
        let mut g = GridSpec { n, lengths, dealias_fraction, tables: Tables::default() };
        g.build_tables();
        Ok(Arc::new(g))
    }

    fn build_tables(&mut self) {
        for axis in 0..3 {
            let n = self.n[axis];
            let dk = 2.0 * std::f64::consts::PI / self.lengths[axis];
            let cutoff = self.dealias_fraction * (n as f64) / 2.0;
            let mut ks = Vec::with_capacity(n);
            let mut keep = Vec::with_capacity(n);
            for m in 0..n {
                let ms = signed_alias(m, n);
                ks.push(dk * ms as f64);
                // Nyquist row is always dropped: it is self-conjugate and the
                // derivative multiplier would break Hermitian symmetry there.
                keep.push((ms.unsigned_abs() as f64) <= cutoff && ms != -((n / 2) as i64));
            }
            self.tables.wavenumbers[axis] = ks;
            self.tables.keep[axis] = keep;
        }
    }

    pub fn n(&self) -> [usize; 3] {
        self.n
    }

    pub fn lengths(&self) -> [f64; 3] {
        self.lengths
    }

    pub fn dealias_fraction(&self) -> f64 {
        self.dealias_fraction
    }

    /// Physical volume of the box.
    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    /// Total number of collocation points.
    pub fn num_points(&self) -> usize {
        self.n.iter().product()
    }

    /// Signed wavevector table along `axis`.
    pub fn wavenumbers(&self, axis: usize) -> &[f64] {
        &self.tables.wavenumbers[axis]
    }

    /// Per-axis dealias keep flags (`false` means the mode is masked).
    pub fn keep(&self, axis: usize) -> &[bool] {
        &self.tables.keep[axis]
    }

    /// Wavevector of the mode at index `(i, j, k)`.
    #[inline]
    pub fn xi(&self, idx: [usize; 3]) -> [f64; 3] {
        [
            self.tables.wavenumbers[0][idx[0]],
            self.tables.wavenumbers[1][idx[1]],
            self.tables.wavenumbers[2][idx[2]],
        ]
    }

    /// True when the mode survives dealiasing.
    #[inline]
    pub fn is_kept(&self, idx: [usize; 3]) -> bool {
        self.tables.keep[0][idx[0]] && self.tables.keep[1][idx[1]] && self.tables.keep[2][idx[2]]
    }

    /// Smallest nonzero |xi| representable on the grid.
    pub fn k_min(&self) -> f64 {
        (0..3)
            .map(|a| 2.0 * std::f64::consts::PI / self.lengths[a])
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest |xi| over modes below Nyquist.
    pub fn k_max(&self) -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            let k = 2.0 * std::f64::consts::PI / self.lengths[a] * (self.n[a] as f64 / 2.0 - 1.0);
            s += k * k;
        }
        s.sqrt()
    }

    /// Largest |m'| kept by the dealias mask on `axis`.
    pub fn max_kept_index(&self, axis: usize) -> i64 {
        let n = self.n[axis];
        let cutoff = self.dealias_fraction * (n as f64) / 2.0;
        (cutoff.floor() as i64).min((n / 2 - 1) as i64)
    }

    /// Spacing of the physical collocation grid along `axis`.
    pub fn dx(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.n[axis] as f64
    }

    /// Collocation coordinate along `axis` at index `i`.
    pub fn x(&self, axis: usize, i: usize) -> f64 {
        self.dx(axis) * i as f64
    }
}

/// Rebuild the internal tables of a grid deserialized from JSON.
pub fn rebuild(g: GridSpec) -> Result<Arc<GridSpec>> {
    GridSpec::new(g.n, g.lengths, g.dealias_fraction)
}

#[inline]
pub(crate) fn signed_alias(m: usize, n: usize) -> i64 {
    if m < n / 2 {
        m as i64
    } else {
        m as i64 - n as i64
    }
}
