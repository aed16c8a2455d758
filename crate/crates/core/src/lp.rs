//! Littlewood-Paley dyadic decomposition (isotropic and vertical) and the
//! norm family built on it: homogeneous Sobolev, Besov, Chemin-Lerner,
//! anisotropic Lebesgue and the energy norm.
//!
//! The dyadic bump `phi` is built from the standard `exp(-1/x)` mollifier:
//! `chi` equals 1 below 3/4 and 0 above 4/3, and `phi(r) = chi(r/2) - chi(r)`
//! is supported in the annulus `[3/4, 8/3]` with an exactly telescoping
//! partition `sum_j phi(2^-j r) = 1` for every resolved `r > 0`.

use crate::field::SpectralField;
use crate::grid::GridSpec;
use crate::{Error, Result};
use ndarray::Array4;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub const INF: f64 = f64::INFINITY;

fn smooth_step(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / x).exp();
        let b = (-1.0 / (1.0 - x)).exp();
        a / (a + b)
    }
}

/// Smooth cutoff: 1 on `r <= 3/4`, 0 on `r >= 4/3`.
pub fn chi(r: f64) -> f64 {
    const LO: f64 = 0.75;
    const HI: f64 = 4.0 / 3.0;
    if r <= LO {
        1.0
    } else if r >= HI {
        0.0
    } else {
        smooth_step((HI - r) / (HI - LO))
    }
}

/// Dyadic bump supported in `[3/4, 8/3]`.
pub fn phi(r: f64) -> f64 {
    chi(0.5 * r) - chi(r)
}

/// Resolved dyadic range `[j_min, j_max]` of a grid: the lowest block still
/// sees the smallest nonzero `|xi|` and the highest sees the largest
/// representable one, with the partition of unity complete in between.
pub fn resolved_range(grid: &GridSpec) -> (i32, i32) {
    let k_min = grid.k_min();
    let k_max_full = {
        let n = grid.n();
        let l = grid.lengths();
        let mut s = 0.0;
        for a in 0..3 {
            let k = 2.0 * std::f64::consts::PI / l[a] * (n[a] as f64 / 2.0);
            s += k * k;
        }
        s.sqrt()
    };
    let j_min = (k_min.log2()).ceil() as i32 - 2;
    let j_max = (k_max_full.log2()).floor() as i32 + 2;
    (j_min, j_max)
}

/// Vertical (third-axis) dyadic range of a grid.
pub fn vertical_range(grid: &GridSpec) -> (i32, i32) {
    let dk = 2.0 * std::f64::consts::PI / grid.lengths()[2];
    let k_max = dk * (grid.n()[2] as f64 / 2.0);
    ((dk.log2()).ceil() as i32 - 2, (k_max.log2()).floor() as i32 + 2)
}

/// Isotropic dyadic block: multiply coefficients by `phi(2^-j |xi|)`.
pub fn dyadic_block(u: &SpectralField, j: i32) -> SpectralField {
    let scale = (-(j as f64)).exp2();
    let mut out = u.clone();
    out.apply_multiplier(|xi| {
        let r = (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt();
        num_complex::Complex64::new(phi(scale * r), 0.0)
    });
    out
}

/// Vertical dyadic block: multiply by `phi(2^-k |xi_3|)`. Modes with
/// `xi_3 = 0` belong to no vertical block; see [`vertical_mean`].
pub fn vertical_block(u: &SpectralField, k: i32) -> SpectralField {
    let scale = (-(k as f64)).exp2();
    let mut out = u.clone();
    out.apply_multiplier(|xi| num_complex::Complex64::new(phi(scale * xi[2].abs()), 0.0));
    out
}

/// The part of the field carried by `xi_3 = 0` (constant in the vertical).
pub fn vertical_mean(u: &SpectralField) -> SpectralField {
    let mut out = u.clone();
    out.apply_multiplier(|xi| {
        if xi[2] == 0.0 {
            num_complex::Complex64::ONE
        } else {
            num_complex::Complex64::ZERO
        }
    });
    out
}

/// Fractional derivative `|D|^d` (spectral multiplier `|xi|^d`, zero mode
/// unchanged for d = 0 and zeroed for d > 0).
pub fn fractional_derivative(u: &SpectralField, d: f64) -> SpectralField {
    if d == 0.0 {
        return u.clone();
    }
    let mut out = u.clone();
    out.apply_multiplier(|xi| {
        let r2 = xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
        if r2 > 0.0 {
            num_complex::Complex64::new(r2.powf(0.5 * d), 0.0)
        } else {
            num_complex::Complex64::ZERO
        }
    });
    out
}

/// Homogeneous Sobolev norm `(vol * sum_{xi != 0} |xi|^{2s} |c|^2)^{1/2}`.
pub fn sobolev_norm(u: &SpectralField, s: f64) -> f64 {
    let grid = u.grid();
    let mut acc = 0.0;
    for c in 0..u.components() {
        let comp = u.coeffs().index_axis(ndarray::Axis(0), c);
        for ((i, j, k), z) in comp.indexed_iter() {
            if (i, j, k) == (0, 0, 0) {
                continue;
            }
            let xi = grid.xi([i, j, k]);
            let r2 = xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
            acc += r2.powf(s) * z.norm_sqr();
        }
    }
    (grid.volume() * acc).sqrt()
}

fn magnitude_grid(fields: &[&SpectralField]) -> (Array4<f64>, Arc<GridSpec>) {
    let grid = fields[0].grid().clone();
    let [n1, n2, n3] = grid.n();
    let mut mag2 = Array4::zeros((1, n1, n2, n3));
    for f in fields {
        let phys = f.transform_inverse();
        for c in 0..f.components() {
            let comp = phys.index_axis(ndarray::Axis(0), c);
            let mut m = mag2.index_axis_mut(ndarray::Axis(0), 0);
            m.zip_mut_with(&comp, |a, b| *a += b * b);
        }
    }
    (mag2, grid)
}

/// Lebesgue norm by Riemann sum on the collocation grid; the pointwise value
/// is the Euclidean magnitude across components. `r = inf` is the maximum.
pub fn lebesgue_norm(u: &SpectralField, r: f64) -> f64 {
    lebesgue_norm_multi(&[u], r)
}

/// Same, with the magnitude taken across the components of several fields
/// (used e.g. for gradient tensors held as per-axis derivative fields).
pub fn lebesgue_norm_multi(fields: &[&SpectralField], r: f64) -> f64 {
    assert!(r >= 1.0, "Lebesgue index must be >= 1");
    let (mag2, grid) = magnitude_grid(fields);
    if r.is_infinite() {
        return mag2.iter().copied().fold(0.0f64, f64::max).sqrt();
    }
    let dv = grid.volume() / grid.num_points() as f64;
    if r == 2.0 {
        return (mag2.iter().sum::<f64>() * dv).sqrt();
    }
    let mut acc = 0.0;
    for m2 in mag2.iter() {
        acc += m2.powf(0.5 * r);
    }
    (acc * dv).powf(1.0 / r)
}

/// Anisotropic norm `L^a_h L^b_v`: inner Lebesgue norm along the vertical
/// line, outer over the horizontal plane. `inf` realized as max.
pub fn aniso_norm(u: &SpectralField, a: f64, b: f64) -> f64 {
    aniso_norm_multi(&[u], a, b)
}

pub fn aniso_norm_multi(fields: &[&SpectralField], a: f64, b: f64) -> f64 {
    assert!(a >= 1.0 && b >= 1.0, "anisotropic indices must be >= 1");
    let (mag2, grid) = magnitude_grid(fields);
    let [n1, n2, n3] = grid.n();
    let dx3 = grid.dx(2);
    let da = grid.dx(0) * grid.dx(1);
    let mag2 = mag2.index_axis(ndarray::Axis(0), 0);
    let mut outer_acc = 0.0;
    let mut outer_max = 0.0f64;
    for i in 0..n1 {
        for j in 0..n2 {
            let mut inner_acc = 0.0;
            let mut inner_max = 0.0f64;
            for k in 0..n3 {
                let m2 = mag2[[i, j, k]];
                if b.is_infinite() {
                    inner_max = inner_max.max(m2);
                } else {
                    inner_acc += m2.powf(0.5 * b);
                }
            }
            let g = if b.is_infinite() {
                inner_max.sqrt()
            } else {
                (inner_acc * dx3).powf(1.0 / b)
            };
            if a.is_infinite() {
                outer_max = outer_max.max(g);
            } else {
                outer_acc += g.powf(a);
            }
        }
    }
    if a.is_infinite() {
        outer_max
    } else {
        (outer_acc * da).powf(1.0 / a)
    }
}

fn lq_sum(values: impl Iterator<Item = f64>, q: f64) -> f64 {
    if q.is_infinite() {
        values.fold(0.0f64, f64::max)
    } else {
        values.map(|v| v.powf(q)).sum::<f64>().powf(1.0 / q)
    }
}

/// Homogeneous Besov norm: `l^q` over blocks of `2^{js} ||block||_{L^p}`.
pub fn besov_norm(u: &SpectralField, s: f64, p: f64, q: f64) -> f64 {
    let (j_min, j_max) = resolved_range(u.grid());
    let vals = (j_min..=j_max).map(|j| {
        let block = dyadic_block(u, j);
        (j as f64 * s).exp2() * lebesgue_norm(&block, p)
    });
    lq_sum(vals, q)
}

/// Per-block norms over the resolved dyadic range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DyadicSpectrum {
    pub entries: Vec<(i32, f64)>,
}

pub fn dyadic_spectrum(u: &SpectralField, p: f64) -> DyadicSpectrum {
    let (j_min, j_max) = resolved_range(u.grid());
    DyadicSpectrum {
        entries: (j_min..=j_max)
            .map(|j| (j, lebesgue_norm(&dyadic_block(u, j), p)))
            .collect(),
    }
}

/// Trapezoid weights for a strictly increasing time grid clipped to `[0, T]`.
fn trapezoid_weights(times: &[f64], t_end: f64) -> Vec<f64> {
    let n = times.len();
    let mut w = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        let (a, b) = (times[i].min(t_end), times[i + 1].min(t_end));
        let h = (b - a).max(0.0);
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    w
}

fn time_lq(values: &[f64], weights: &[f64], a: f64) -> f64 {
    if a.is_infinite() {
        values.iter().copied().fold(0.0f64, f64::max)
    } else {
        values
            .iter()
            .zip(weights)
            .map(|(v, w)| w * v.powf(a))
            .sum::<f64>()
            .powf(1.0 / a)
    }
}

/// Chemin-Lerner norm `tilde L^a_t Besov^s_{b,c}`: time integration inside
/// the block sum.
pub fn chemin_lerner_norm(series: &[(f64, SpectralField)], a: f64, b: f64, c: f64, s: f64) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::InvalidInput("Chemin-Lerner norm needs at least 2 samples".into()));
    }
    let times: Vec<f64> = series.iter().map(|(t, _)| *t).collect();
    let t_end = *times.last().unwrap();
    let w = trapezoid_weights(&times, t_end);
    let (j_min, j_max) = resolved_range(series[0].1.grid());
    let vals = (j_min..=j_max).map(|j| {
        let block_norms: Vec<f64> =
            series.iter().map(|(_, u)| lebesgue_norm(&dyadic_block(u, j), b)).collect();
        (j as f64 * s).exp2() * time_lq(&block_norms, &w, a)
    });
    Ok(lq_sum(vals, c))
}

/// Plain space-time norm `L^a_t Besov^s_{b,c}` on the same quadrature.
pub fn time_besov_norm(series: &[(f64, SpectralField)], a: f64, b: f64, c: f64, s: f64) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::InvalidInput("time-Besov norm needs at least 2 samples".into()));
    }
    let times: Vec<f64> = series.iter().map(|(t, _)| *t).collect();
    let t_end = *times.last().unwrap();
    let w = trapezoid_weights(&times, t_end);
    let vals: Vec<f64> = series.iter().map(|(_, u)| besov_norm(u, s, b, c)).collect();
    Ok(time_lq(&vals, &w, a))
}

/// Energy norm: `sqrt(sup_t ||u||_{H^s}^2 + nu0 int_0^T ||u||_{H^{s+1}}^2)`.
pub fn energy_norm(series: &[(f64, SpectralField)], s: f64, nu0: f64, t_end: f64) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::InvalidInput("energy norm of an empty series".into()));
    }
    let times: Vec<f64> = series.iter().map(|(t, _)| *t).collect();
    let hs: Vec<f64> = series.iter().map(|(_, u)| sobolev_norm(u, s)).collect();
    let hs1: Vec<f64> = series.iter().map(|(_, u)| sobolev_norm(u, s + 1.0)).collect();
    energy_norm_from_samples(&times, &hs, &hs1, nu0, t_end)
}

/// Energy norm from precomputed `H^s` and `H^{s+1}` sample values.
pub fn energy_norm_from_samples(
    times: &[f64],
    hs: &[f64],
    hs1: &[f64],
    nu0: f64,
    t_end: f64,
) -> Result<f64> {
    if times.is_empty() {
        return Err(Error::InvalidInput("energy norm of an empty series".into()));
    }
    let sup2 = hs.iter().map(|v| v * v).fold(0.0f64, f64::max);
    let w = trapezoid_weights(times, t_end);
    let int2: f64 = hs1.iter().zip(&w).map(|(v, w)| w * v * v).sum();
    Ok((sup2 + nu0 * int2).sqrt())
}

/// Interpolation diagnostic: returns the Besov `B^s_{2,1}` norm, the product
/// `||u||_{H^{s-alpha}}^{beta/(alpha+beta)} ||u||_{H^{s+beta}}^{alpha/(alpha+beta)}`
/// and their ratio.
pub fn interpolation_check(u: &SpectralField, s: f64, alpha: f64, beta: f64) -> Result<(f64, f64, f64)> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::InvalidInput("interpolation exponents must be positive".into()));
    }
    let lhs = besov_norm(u, s, 2.0, 1.0);
    let lo = sobolev_norm(u, s - alpha);
    let hi = sobolev_norm(u, s + beta);
    if lo == 0.0 || hi == 0.0 {
        return Err(Error::InvalidInput("interpolation check on a zero field".into()));
    }
    let rhs = lo.powf(beta / (alpha + beta)) * hi.powf(alpha / (alpha + beta));
    Ok((lhs, rhs, lhs / rhs))
}

/// Extremal constants of the pointwise weight
/// `h_s(r) = sum_j (2^{js} phi(2^-j r) / r^s)^2`, which bound the ratio
/// `Besov^s_{2,2} / Sobolev^s` from below and above. The weight is
/// multiplicatively 2-periodic, so min/max are taken over one period.
pub fn besov_sobolev_bounds(s: f64) -> (f64, f64) {
    let samples = 20_000;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..samples {
        let r = (i as f64 / samples as f64).exp2(); // r in [1, 2)
        let mut acc = 0.0;
        for j in -3..=3 {
            let w = (j as f64 * s).exp2() * phi((-(j as f64)).exp2() * r);
            acc += (w / r.powf(s)).powi(2);
        }
        lo = lo.min(acc.sqrt());
        hi = hi.max(acc.sqrt());
    }
    (lo, hi)
}

/// Relative L2 mass of coefficients where the clipped partition of unity
/// deviates from 1 (reported as the truncation estimate of block-based norms).
pub fn partition_truncation(u: &SpectralField) -> f64 {
    let grid = u.grid();
    let (j_min, j_max) = resolved_range(grid);
    let total: f64 = u.coeffs().iter().map(|z| z.norm_sqr()).sum();
    if total == 0.0 {
        return 0.0;
    }
    let mut bad = 0.0;
    for c in 0..u.components() {
        let comp = u.coeffs().index_axis(ndarray::Axis(0), c);
        for ((i, j, k), z) in comp.indexed_iter() {
            if (i, j, k) == (0, 0, 0) {
                continue;
            }
            let xi = grid.xi([i, j, k]);
            let r = (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt();
            let psum: f64 = (j_min..=j_max).map(|jj| phi((-(jj as f64)).exp2() * r)).sum();
            bad += (1.0 - psum).powi(2) * z.norm_sqr();
        }
    }
    (bad / total).sqrt()
}

/// One norm evaluation request, as consumed by the `norms` CLI command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormRequest {
    pub kind: NormKind,
    #[serde(default)]
    pub s: f64,
    #[serde(default = "default_index", deserialize_with = "de_index", serialize_with = "ser_index")]
    pub p: f64,
    #[serde(default = "default_index", deserialize_with = "de_index", serialize_with = "ser_index")]
    pub q: f64,
    #[serde(default = "default_index", deserialize_with = "de_index", serialize_with = "ser_index")]
    pub a: f64,
    #[serde(default = "default_nu0")]
    pub nu0: f64,
}

fn default_index() -> f64 {
    2.0
}

fn default_nu0() -> f64 {
    1.0
}

fn de_index<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(x) => Ok(x),
        Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid index {t:?}, expected number or \"inf\""))),
    }
}

fn ser_index<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Sobolev,
    Besov,
    Lebesgue,
    Aniso,
    CheminLerner,
    Energy,
}

impl NormRequest {
    /// Validate index ranges.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p", self.p), ("q", self.q), ("a", self.a)] {
            if !(v >= 1.0) {
                return Err(Error::InvalidInput(format!("{name} = {v} out of range [1, inf]")));
            }
        }
        if !self.s.is_finite() {
            return Err(Error::InvalidInput("s must be finite".into()));
        }
        Ok(())
    }

    /// Evaluate against a time-stamped series (single-sample series for the
    /// purely spatial kinds). Returns `(value, truncation_estimate)`.
    pub fn evaluate(&self, series: &[(f64, SpectralField)]) -> Result<(f64, f64)> {
        self.validate()?;
        if series.is_empty() {
            return Err(Error::InvalidInput("no snapshots provided".into()));
        }
        let u = &series[0].1;
        match self.kind {
            NormKind::Sobolev => Ok((sobolev_norm(u, self.s), 0.0)),
            NormKind::Lebesgue => Ok((lebesgue_norm(u, self.p), 0.0)),
            NormKind::Aniso => Ok((aniso_norm(u, self.p, self.q), 0.0)),
            NormKind::Besov => Ok((besov_norm(u, self.s, self.p, self.q), partition_truncation(u))),
            NormKind::CheminLerner => {
                let v = chemin_lerner_norm(series, self.a, self.p, self.q, self.s)?;
                Ok((v, partition_truncation(u)))
            }
            NormKind::Energy => {
                let t_end = series.last().unwrap().0;
                Ok((energy_norm(series, self.s, self.nu0, t_end)?, 0.0))
            }
        }
    }
}
