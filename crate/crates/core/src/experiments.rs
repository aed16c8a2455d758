//! Ill-prepared data construction, convergence-rate sweeps over the Rossby
//! number, and dispersive-decay probes of the linear semigroup.
//!
//! Measured exponents are reported next to the predicted ones; only weak
//! monotonicity and positivity are asserted by the acceptance suite, since
//! the sharp whole-space rates are not reproducible on a finite torus.

use crate::field::SpectralField;
use crate::grid::GridSpec;
use crate::lp::{aniso_norm_multi, lebesgue_norm_multi, sobolev_norm};
use crate::ops::{leray_project, osc_project, qg_from_vorticity, PhysParams, WaveBasis, WaveSystem};
use crate::systems::{Field2D, Grid2, SystemKind};
use crate::timestep::{
    integrate, observers, semigroup_apply_with, CoupledSystem, DtPolicy, FlowState, IntegrateOpts,
    Observer, Role, RunOutcome,
};
use crate::{Error, Result};
use ndarray::Array3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Spectral profile of the oscillating initial data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "profile")]
pub enum ShellProfile {
    /// All energy on one lattice sphere `|m| = N` (norm targets exact).
    SingleShell,
    /// Power-law amplitudes `|xi|^slope` over all kept modes.
    PowerLaw { slope: f64 },
}

/// Construction parameters for ill-prepared initial data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    /// Extra regularity above the critical index.
    pub delta: f64,
    /// Blow-up exponent of the oscillating part, in `(0, delta/2)`.
    pub gamma: f64,
    /// Convergence exponent of the quasi-geostrophic part of the data.
    pub alpha0: f64,
    /// Size constant (norm targets scale with it).
    pub c0: f64,
    /// Low-frequency index `c` of the intersection norm, in `(0, 1)`.
    pub c_lowfreq: f64,
    pub seed: u64,
    pub shell: ShellProfile,
    /// Base radius of the moving shell: the target radius is
    /// `shell_base * eps^{-gamma/delta}`.
    pub shell_base: f64,
}

impl DataSpec {
    pub fn validate(&self, system: WaveSystem) -> Result<()> {
        let delta_max = match system {
            WaveSystem::Pe => 1.0 / 6.0,
            WaveSystem::Rf => 0.25,
        };
        if !(self.delta > 0.0 && self.delta <= delta_max + 1e-12) {
            return Err(Error::InvalidInput(format!(
                "delta = {} out of (0, {delta_max}]",
                self.delta
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 0.5 * self.delta) {
            return Err(Error::InvalidInput(format!(
                "gamma = {} must lie in (0, delta/2) = (0, {})",
                self.gamma,
                0.5 * self.delta
            )));
        }
        if !(self.alpha0 > 0.0) {
            return Err(Error::InvalidInput("alpha0 must be positive".into()));
        }
        if !(self.c0 >= 1.0) {
            return Err(Error::InvalidInput("c0 must be at least 1".into()));
        }
        if !(self.c_lowfreq > 0.0 && self.c_lowfreq < 1.0) {
            return Err(Error::InvalidInput("c_lowfreq must lie in (0, 1)".into()));
        }
        if !(self.shell_base > 0.0) {
            return Err(Error::InvalidInput("shell_base must be positive".into()));
        }
        Ok(())
    }

    /// `eta_0 = (1 - 2 gamma/delta) / 2`, in `(0, 1/2)`.
    pub fn eta0(&self) -> f64 {
        0.5 * (1.0 - 2.0 * self.gamma / self.delta)
    }

    /// Dyadic index of the moving shell.
    pub fn shell_index(&self, eps: f64) -> i32 {
        (self.shell_base * eps.powf(-self.gamma / self.delta)).log2().round() as i32
    }
}

fn require_cubic(grid: &GridSpec) -> Result<f64> {
    let l = grid.lengths();
    let n = grid.n();
    if (l[0] - l[1]).abs() > 1e-12 || (l[0] - l[2]).abs() > 1e-12 || n[0] != n[1] || n[0] != n[2] {
        return Err(Error::InvalidInput(
            "single-shell data construction needs a cubic grid (equal periods and resolutions)".into(),
        ));
    }
    Ok(l[0])
}

/// Lattice points `m` with `|m|^2 = n2`, one representative per `+-` pair,
/// in lexicographic order.
fn sphere_modes(n2: i64) -> Vec<[i64; 3]> {
    let nmax = (n2 as f64).sqrt() as i64 + 1;
    let mut out = Vec::new();
    for m1 in -nmax..=nmax {
        for m2 in -nmax..=nmax {
            let rem = n2 - m1 * m1 - m2 * m2;
            if rem < 0 {
                continue;
            }
            let m3 = (rem as f64).sqrt().round() as i64;
            if m3 * m3 != rem {
                continue;
            }
            for m3 in if m3 == 0 { vec![0] } else { vec![-m3, m3] } {
                let m = [m1, m2, m3];
                // keep one representative of {m, -m}
                if m > [-m1, -m2, -m3] {
                    out.push(m);
                }
            }
        }
    }
    out.sort();
    out
}

fn lattice_index(m: i64, n: usize) -> usize {
    if m >= 0 {
        m as usize
    } else {
        (m + n as i64) as usize
    }
}

/// Random oscillating data for the primitive system: concentrated on the
/// moving shell, divergence-free and vorticity-free (built inside the range
/// of the oscillating projector), with the intersection norm
/// `max(H^{1/2 + c delta}, H^{1/2 + delta})` equal to `c0 * eps^{-gamma}`
/// exactly.
pub fn make_osc_data_pe(
    grid: &Arc<GridSpec>,
    spec: &DataSpec,
    eps: f64,
    froude: f64,
) -> Result<SpectralField> {
    spec.validate(WaveSystem::Pe)?;
    let mut u = make_osc_data_raw(grid, spec, eps, 4)?;
    u = leray_project(&u)?;
    u = osc_project(&u, froude)?;
    finish_osc_data(&mut u, spec, eps)?;
    Ok(u)
}

/// Rotating-fluids variant: three components, divergence-free, same exact
/// norm target.
pub fn make_osc_data_rf(grid: &Arc<GridSpec>, spec: &DataSpec, eps: f64) -> Result<SpectralField> {
    spec.validate(WaveSystem::Rf)?;
    let mut u = make_osc_data_raw(grid, spec, eps, 3)?;
    u = leray_project(&u)?;
    finish_osc_data(&mut u, spec, eps)?;
    Ok(u)
}

fn finish_osc_data(u: &mut SpectralField, spec: &DataSpec, eps: f64) -> Result<()> {
    u.dealias();
    u.zero_mean();
    let target = spec.c0 * eps.powf(-spec.gamma);
    let measured = sobolev_norm(u, 0.5 + spec.delta)
        .max(sobolev_norm(u, 0.5 + spec.c_lowfreq * spec.delta));
    if measured == 0.0 {
        return Err(Error::InvalidInput("oscillating data construction produced a zero field".into()));
    }
    u.scale(target / measured);
    Ok(())
}

fn make_osc_data_raw(
    grid: &Arc<GridSpec>,
    spec: &DataSpec,
    eps: f64,
    comps: usize,
) -> Result<SpectralField> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x05c1_11e5);
    let mut u = SpectralField::zeros(grid.clone(), comps)?;
    match spec.shell {
        ShellProfile::SingleShell => {
            let length = require_cubic(grid)?;
            let j = spec.shell_index(eps);
            let radius = (j as f64).exp2();
            let n_lat = (radius * length / (2.0 * std::f64::consts::PI)).round().max(1.0) as i64;
            let max_kept = grid.max_kept_index(0);
            if n_lat > max_kept {
                let needed = (2.0 * n_lat as f64 / grid.dealias_fraction()).ceil() as usize;
                return Err(Error::GridTooSmall { required_n: needed + needed % 2 });
            }
            let n = grid.n()[0];
            for m in sphere_modes(n_lat * n_lat) {
                let idx = [
                    lattice_index(m[0], n),
                    lattice_index(m[1], n),
                    lattice_index(m[2], n),
                ];
                let conj_idx = [
                    lattice_index(-m[0], n),
                    lattice_index(-m[1], n),
                    lattice_index(-m[2], n),
                ];
                for c in 0..comps {
                    let z = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    u.coeffs_mut()[[c, idx[0], idx[1], idx[2]]] = z;
                    u.coeffs_mut()[[c, conj_idx[0], conj_idx[1], conj_idx[2]]] = z.conj();
                }
            }
        }
        ShellProfile::PowerLaw { slope } => {
            let [n1, n2, n3] = grid.n();
            for c in 0..comps {
                for i in 0..n1 {
                    for jj in 0..n2 {
                        for k in 0..n3 {
                            if (i, jj, k) == (0, 0, 0) || !grid.is_kept([i, jj, k]) {
                                continue;
                            }
                            let xi = grid.xi([i, jj, k]);
                            let r = (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt();
                            let amp = r.powf(slope);
                            u.coeffs_mut()[[c, i, jj, k]] = Complex64::new(
                                rng.random_range(-1.0..1.0),
                                rng.random_range(-1.0..1.0),
                            ) * amp;
                        }
                    }
                }
            }
            // restore Hermitian symmetry by averaging with the reflected conjugate
            let sym = u.clone();
            let [n1, n2, n3] = grid.n();
            for c in 0..comps {
                for i in 0..n1 {
                    for jj in 0..n2 {
                        for k in 0..n3 {
                            let m = [(n1 - i) % n1, (n2 - jj) % n2, (n3 - k) % n3];
                            u.coeffs_mut()[[c, i, jj, k]] = 0.5
                                * (sym.coeffs()[[c, i, jj, k]]
                                    + sym.coeffs()[[c, m[0], m[1], m[2]]].conj());
                        }
                    }
                }
            }
        }
    }
    u.zero_mean();
    Ok(u)
}

/// Deterministic low-mode quasi-geostrophic limit datum with intersection
/// norm exactly `c0`, plus a perturbed copy at distance exactly
/// `c0 * eps^alpha0` in the same norm. Returns `(perturbed, limit)`.
pub fn make_qg_data(
    grid: &Arc<GridSpec>,
    spec: &DataSpec,
    eps: f64,
    froude: f64,
) -> Result<(SpectralField, SpectralField)> {
    spec.validate(WaveSystem::Pe)?;
    let base_modes: [([i64; 3], f64); 5] = [
        ([1, 0, 0], 1.0),
        ([0, 1, 1], 0.8),
        ([1, 1, 0], -0.6),
        ([1, 0, 1], 0.5),
        ([0, 2, 1], 0.3),
    ];
    let pert_modes: [([i64; 3], f64); 3] = [([2, 1, 0], 1.0), ([0, 1, 2], -0.7), ([1, 2, 1], 0.4)];
    let h1 = 0.5 + spec.delta;
    let build = |modes: &[([i64; 3], f64)]| -> Result<SpectralField> {
        let mut om = SpectralField::zeros(grid.clone(), 1)?;
        let n = grid.n();
        for (m, amp) in modes {
            let idx = [
                lattice_index(m[0], n[0]),
                lattice_index(m[1], n[1]),
                lattice_index(m[2], n[2]),
            ];
            let cj = [
                lattice_index(-m[0], n[0]),
                lattice_index(-m[1], n[1]),
                lattice_index(-m[2], n[2]),
            ];
            om.coeffs_mut()[[0, idx[0], idx[1], idx[2]]] += Complex64::new(0.5 * amp, 0.0);
            om.coeffs_mut()[[0, cj[0], cj[1], cj[2]]] += Complex64::new(0.5 * amp, 0.0);
        }
        let mut u = qg_from_vorticity(&om, froude)?;
        u.dealias();
        let norm = sobolev_norm(&u, 0.5).max(sobolev_norm(&u, h1));
        if norm == 0.0 {
            return Err(Error::InvalidInput("QG profile is zero".into()));
        }
        u.scale(1.0 / norm);
        Ok(u)
    };
    let mut limit = build(&base_modes)?;
    limit.scale(spec.c0);
    let pert = build(&pert_modes)?;
    let mut perturbed = limit.clone();
    perturbed.axpy(spec.c0 * eps.powf(spec.alpha0), &pert);
    Ok((perturbed, limit))
}

/// Deterministic low-mode divergence-free 2D limit datum with L2 norm `c0`.
pub fn make_ubar_data(grid: &Arc<Grid2>, c0: f64) -> Result<Field2D> {
    let mut psi: ndarray::Array2<f64> = ndarray::Array2::zeros((grid.n()[0], grid.n()[1]));
    for ((i, j), v) in psi.indexed_iter_mut() {
        let (x, y) = (grid.x(0, i), grid.x(1, j));
        let (l1, l2) = (grid.lengths()[0], grid.lengths()[1]);
        let k1 = 2.0 * std::f64::consts::PI / l1;
        let k2 = 2.0 * std::f64::consts::PI / l2;
        *v = (k1 * x).sin() * (k2 * y).cos() + 0.5 * (2.0 * k1 * x).cos() * (k2 * y).sin();
    }
    let psi_f = {
        let mut s = Array3::zeros((3, grid.n()[0], grid.n()[1]));
        s.index_axis_mut(ndarray::Axis(0), 0).assign(&psi);
        Field2D::transform_forward(grid.clone(), &s)?
    };
    // velocity = perp gradient of the stream function; third component mixes
    // the same harmonics
    let mut u = Field2D::zeros(grid.clone());
    let dpsi_dx = psi_f.derivative(0);
    let dpsi_dy = psi_f.derivative(1);
    u.coeffs_mut()
        .index_axis_mut(ndarray::Axis(0), 0)
        .assign(&dpsi_dy.coeffs().index_axis(ndarray::Axis(0), 0).mapv(|z| -z));
    u.coeffs_mut()
        .index_axis_mut(ndarray::Axis(0), 1)
        .assign(&dpsi_dx.coeffs().index_axis(ndarray::Axis(0), 0));
    u.coeffs_mut()
        .index_axis_mut(ndarray::Axis(0), 2)
        .assign(&psi_f.coeffs().index_axis(ndarray::Axis(0), 0));
    u.dealias();
    u.coeffs_mut().slice_mut(ndarray::s![.., 0, 0]).fill(Complex64::ZERO);
    let norm = u.l2_norm();
    if norm == 0.0 {
        return Err(Error::InvalidInput("2D profile is zero".into()));
    }
    u.scale(c0 / norm);
    Ok(u)
}

/// Least-squares fit of `value = prefactor * eps^alpha` in log-log space.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub prefactor: f64,
    pub r2: f64,
}

pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "power-law fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    for (eps, v) in points {
        if !(*eps > 0.0 && *v > 0.0) {
            return Err(Error::InvalidInput(format!(
                "power-law fit needs positive samples, got ({eps}, {v})"
            )));
        }
    }
    let xs: Vec<f64> = points.iter().map(|(e, _)| e.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, v)| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let alpha = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let b = my - alpha * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let p = alpha * x + b;
            (y - p) * (y - p)
        })
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(PowerLawFit { alpha, prefactor: b.exp(), r2 })
}

/// Which family of systems a sweep integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepSystem {
    Pe,
    Rf,
}

/// Sweep configuration (grids, physics, data, schedule).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub system: SweepSystem,
    pub grid_n: usize,
    pub period: f64,
    pub dealias_fraction: f64,
    pub nu: f64,
    pub nu_prime: f64,
    pub froude: f64,
    pub data: DataSpec,
    pub eps_list: Vec<f64>,
    pub t_end: f64,
    pub s_list: Vec<f64>,
    /// Base time step; each run uses `min(dt_base, eps_dt_fraction * eps)`.
    pub dt_base: f64,
    pub eps_dt_fraction: f64,
    pub observe_every: usize,
    /// Exponent weight of the fractional derivative in the mixed norm,
    /// in units of `delta` (defaults to `eta0/2`).
    pub eta_prime: Option<f64>,
}

/// One row of a rate report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateRow {
    pub eps: f64,
    pub diverged: bool,
    pub values: BTreeMap<String, f64>,
}

/// One fitted norm with its predicted exponent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateFit {
    pub norm: String,
    pub alpha: f64,
    pub prefactor: f64,
    pub r2: f64,
    pub predicted: Option<f64>,
    pub discrepancy: Option<f64>,
}

/// The outcome of an epsilon sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    pub fits: Vec<RateFit>,
}

impl RateReport {
    pub fn series(&self, norm: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| !r.diverged)
            .filter_map(|r| r.values.get(norm).map(|v| (r.eps, *v)))
            .collect()
    }

    pub fn fit(&self, norm: &str) -> Option<&RateFit> {
        self.fits.iter().find(|f| f.norm == norm)
    }
}

fn l2_time(times: &[f64], vals: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..times.len().saturating_sub(1) {
        let h = times[i + 1] - times[i];
        acc += 0.5 * h * (vals[i] * vals[i] + vals[i + 1] * vals[i + 1]);
    }
    acc.sqrt()
}

/// Run the full convergence-rate sweep: integrate the coupled systems for
/// every Rossby number, collect energy and mixed space-time norms of the
/// error field, and fit log-log slopes against the predicted exponents.
pub fn epsilon_sweep(cfg: &SweepConfig) -> Result<RateReport> {
    if cfg.eps_list.len() < 3 {
        return Err(Error::InvalidInput("sweep needs at least 3 epsilon points".into()));
    }
    let wave_system = match cfg.system {
        SweepSystem::Pe => WaveSystem::Pe,
        SweepSystem::Rf => WaveSystem::Rf,
    };
    cfg.data.validate(wave_system)?;
    let grid = GridSpec::new(
        [cfg.grid_n; 3],
        [cfg.period; 3],
        cfg.dealias_fraction,
    )?;
    let eta0 = cfg.data.eta0();
    let etap = cfg.eta_prime.unwrap_or(0.5 * eta0);
    let mut rows = Vec::new();
    for &eps in &cfg.eps_list {
        let params = PhysParams::new(cfg.nu, cfg.nu_prime, cfg.froude, eps)?;
        let dt = cfg.dt_base.min(cfg.eps_dt_fraction * eps);
        let opts = IntegrateOpts {
            t_end: cfg.t_end,
            dt: DtPolicy::Fixed { dt },
            observe_every: cfg.observe_every,
        };
        let row = match cfg.system {
            SweepSystem::Pe => sweep_point_pe(cfg, &grid, params, &opts, etap)?,
            SweepSystem::Rf => sweep_point_rf(cfg, &grid, params, &opts, etap)?,
        };
        rows.push(RateRow { eps, diverged: row.is_none(), values: row.unwrap_or_default() });
    }
    // fits over the non-diverged rows
    let mut fits = Vec::new();
    let names: Vec<String> = rows
        .iter()
        .find(|r| !r.diverged)
        .map(|r| r.values.keys().cloned().collect())
        .unwrap_or_default();
    for name in names {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| !r.diverged)
            .filter_map(|r| r.values.get(&name).map(|v| (r.eps, *v)))
            .filter(|(_, v)| *v > 0.0)
            .collect();
        if pts.len() < 3 {
            continue;
        }
        let fit = fit_power_law(&pts)?;
        let predicted = predicted_exponent(cfg, &name, eta0, etap);
        fits.push(RateFit {
            norm: name,
            alpha: fit.alpha,
            prefactor: fit.prefactor,
            r2: fit.r2,
            predicted,
            discrepancy: predicted.map(|p| fit.alpha - p),
        });
    }
    Ok(RateReport { rows, fits })
}

/// Theorem-side exponents: for the energy norms
/// `min(alpha0, (1/2 + 2 eta0 delta - s)/2)` (primitive) and
/// `(1/2 + 2 eta0 delta - s)` with `k -> 1` (rotating); for the mixed norm
/// `min(alpha0, (eta0 - eta/2) delta)` resp. `delta (eta0 - eta'/2)`.
fn predicted_exponent(cfg: &SweepConfig, norm: &str, eta0: f64, etap: f64) -> Option<f64> {
    let d = cfg.data.delta;
    let a0 = cfg.data.alpha0;
    if let Some(srep) = norm.strip_prefix("energy_s_") {
        let s: f64 = srep.parse().ok()?;
        return Some(match cfg.system {
            SweepSystem::Pe => a0.min(0.5 * (0.5 + 2.0 * eta0 * d - s)),
            SweepSystem::Rf => 0.5 + 2.0 * eta0 * d - s,
        });
    }
    match (cfg.system, norm) {
        (SweepSystem::Pe, "l2linf_frac") => {
            // eta chosen as eta0 in the observers
            Some(a0.min((eta0 - 0.5 * etap) * d))
        }
        (SweepSystem::Pe, "l2linf") => {
            Some(0.5 * (a0.min(2.0 / 3.0 * eta0 * d) + a0.min(eta0 * d)))
        }
        (SweepSystem::Rf, "l2linf_frac") => Some(d * (eta0 - 0.5 * etap)),
        (SweepSystem::Rf, "l2linf") => Some(5.0 / 6.0 * eta0 * d),
        _ => None,
    }
}

fn sweep_point_pe(
    cfg: &SweepConfig,
    grid: &Arc<GridSpec>,
    params: PhysParams,
    opts: &IntegrateOpts,
    etap: f64,
) -> Result<Option<BTreeMap<String, f64>>> {
    let (u0_qg_eps, u0_limit) = make_qg_data(grid, &cfg.data, params.eps, params.froude)?;
    let w0 = make_osc_data_pe(grid, &cfg.data, params.eps, params.froude)?;
    let sys = CoupledSystem::new(
        grid.clone(),
        params,
        vec![
            (Role::UQg, SystemKind::Qg),
            (Role::WH, SystemKind::WH),
            (Role::WInh, SystemKind::WInh),
            (Role::Delta, SystemKind::DeltaPe),
        ],
    )?;
    let mut st = FlowState::new(0.0, params);
    st.insert3(Role::UQg, u0_limit.clone());
    st.insert3(Role::WH, w0);
    st.insert3(Role::WInh, SpectralField::zeros(grid.clone(), 4)?);
    st.insert3(Role::Delta, u0_qg_eps.sub(&u0_limit));
    let mut obs: Vec<Observer> = Vec::new();
    for &s in &cfg.s_list {
        obs.push(observers::sobolev(Role::Delta, s));
        obs.push(observers::sobolev(Role::Delta, s + 1.0));
    }
    let d_frac = etap * cfg.data.delta;
    obs.push(observers::linf_of_sum(
        "linf_frac",
        vec![Role::Delta, Role::WH, Role::WInh],
        d_frac,
    ));
    obs.push(observers::linf_of_sum("linf", vec![Role::Delta, Role::WH, Role::WInh], 0.0));
    let rec = integrate(&sys, st, opts, &obs, None)?;
    if matches!(rec.outcome, RunOutcome::Diverged { .. }) {
        return Ok(None);
    }
    let mut values = BTreeMap::new();
    for &s in &cfg.s_list {
        let hs = rec.column(&format!("hs_DELTA_{s}")).unwrap();
        let hs1 = rec.column(&format!("hs_DELTA_{}", s + 1.0)).unwrap();
        let e = crate::lp::energy_norm_from_samples(&rec.times, &hs, &hs1, params.nu_zero(), cfg.t_end)?;
        values.insert(format!("energy_s_{s}"), e);
    }
    values.insert("l2linf_frac".into(), l2_time(&rec.times, &rec.column("linf_frac").unwrap()));
    values.insert("l2linf".into(), l2_time(&rec.times, &rec.column("linf").unwrap()));
    Ok(Some(values))
}

fn sweep_point_rf(
    cfg: &SweepConfig,
    grid: &Arc<GridSpec>,
    params: PhysParams,
    opts: &IntegrateOpts,
    etap: f64,
) -> Result<Option<BTreeMap<String, f64>>> {
    let grid2 = Grid2::new([cfg.grid_n; 2], [cfg.period; 2], cfg.dealias_fraction)?;
    let ubar0 = make_ubar_data(&grid2, cfg.data.c0)?;
    let w0 = make_osc_data_rf(grid, &cfg.data, params.eps)?;
    let sys = CoupledSystem::new(
        grid.clone(),
        params,
        vec![
            (Role::Ubar, SystemKind::Ns2d),
            (Role::WRf, SystemKind::Lrf),
            (Role::Delta, SystemKind::DeltaRf),
        ],
    )?;
    let mut st = FlowState::new(0.0, params);
    st.insert2(Role::Ubar, ubar0);
    st.insert3(Role::WRf, w0);
    st.insert3(Role::Delta, SpectralField::zeros(grid.clone(), 3)?);
    let mut obs: Vec<Observer> = Vec::new();
    for &s in &cfg.s_list {
        obs.push(observers::sobolev(Role::Delta, s));
        obs.push(observers::sobolev(Role::Delta, s + 1.0));
    }
    let d_frac = etap * cfg.data.delta;
    obs.push(observers::linf_of_sum("linf_frac", vec![Role::Delta, Role::WRf], d_frac));
    obs.push(observers::linf_of_sum("linf", vec![Role::Delta, Role::WRf], 0.0));
    let rec = integrate(&sys, st, opts, &obs, None)?;
    if matches!(rec.outcome, RunOutcome::Diverged { .. }) {
        return Ok(None);
    }
    let mut values = BTreeMap::new();
    for &s in &cfg.s_list {
        let hs = rec.column(&format!("hs_DELTA_{s}")).unwrap();
        let hs1 = rec.column(&format!("hs_DELTA_{}", s + 1.0)).unwrap();
        let e = crate::lp::energy_norm_from_samples(&rec.times, &hs, &hs1, params.nu, cfg.t_end)?;
        values.insert(format!("energy_s_{s}"), e);
    }
    values.insert("l2linf_frac".into(), l2_time(&rec.times, &rec.column("linf_frac").unwrap()));
    values.insert("l2linf".into(), l2_time(&rec.times, &rec.column("linf").unwrap()));
    Ok(Some(values))
}

/// A space norm probed along the semigroup flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "space")]
pub enum ProbeSpace {
    Lebesgue { r: f64 },
    Aniso { a: f64, b: f64 },
}

/// One space-time norm target of the dispersive probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeNorm {
    /// Time integrability index (`inf` allowed).
    pub time_p: f64,
    #[serde(flatten)]
    pub space: ProbeSpace,
    /// Order of the fractional derivative `|D|^d` applied first.
    #[serde(default)]
    pub deriv: f64,
    /// Probe the gradient tensor instead of the field.
    #[serde(default)]
    pub gradient: bool,
}

impl ProbeNorm {
    pub fn name(&self) -> String {
        let time = if self.time_p.is_infinite() { "Linf".into() } else { format!("L{}", self.time_p) };
        let grad = if self.gradient { "grad_" } else { "" };
        let deriv = if self.deriv != 0.0 { format!("D{}_", self.deriv) } else { String::new() };
        match self.space {
            ProbeSpace::Lebesgue { r } => {
                let rr = if r.is_infinite() { "inf".into() } else { format!("{r}") };
                format!("{time}t_{deriv}{grad}L{rr}")
            }
            ProbeSpace::Aniso { a, b } => {
                let aa = if a.is_infinite() { "inf".into() } else { format!("{a}") };
                format!("{time}t_{deriv}{grad}Lhv{aa}_{b}")
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub system: SweepSystem,
    pub grid_n: usize,
    pub period: f64,
    pub dealias_fraction: f64,
    pub nu: f64,
    pub froude: f64,
    pub eps_list: Vec<f64>,
    /// Dyadic index of the datum shell.
    pub shell_j: i32,
    pub seed: u64,
    pub num_samples: usize,
    /// Horizon; capped at the torus wrap-around time.
    pub t_max: Option<f64>,
    pub norms: Vec<ProbeNorm>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeRow {
    pub eps: f64,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub t_used: f64,
    pub rows: Vec<ProbeRow>,
    pub fits: Vec<RateFit>,
    pub warnings: Vec<String>,
}

/// Largest group speed `(1/eps) |grad omega|` over the shell directions.
fn group_speed_bound(system: WaveSystem, froude: f64, radius: f64) -> f64 {
    let mut worst: f64 = 0.0;
    let samples = 64;
    for a in 0..samples {
        for b in 0..samples {
            let th = std::f64::consts::PI * (a as f64 + 0.5) / samples as f64;
            let ph = 2.0 * std::f64::consts::PI * b as f64 / samples as f64;
            let xi = [
                radius * th.sin() * ph.cos(),
                radius * th.sin() * ph.sin(),
                radius * th.cos(),
            ];
            let r = radius;
            let g = match system {
                WaveSystem::Pe => {
                    let kf = (xi[0] * xi[0] + xi[1] * xi[1] + froude * froude * xi[2] * xi[2]).sqrt();
                    let c = [1.0, 1.0, froude * froude];
                    let mut s = 0.0;
                    for i in 0..3 {
                        let gi = c[i] * xi[i] / (froude * r * kf) - kf * xi[i] / (froude * r * r * r);
                        s += gi * gi;
                    }
                    s.sqrt()
                }
                WaveSystem::Rf => {
                    let mut s = 0.0;
                    for i in 0..3 {
                        let gi = if i == 2 { 1.0 / r } else { 0.0 } - xi[2] * xi[i] / (r * r * r);
                        s += gi * gi;
                    }
                    s.sqrt()
                }
            };
            worst = worst.max(g);
        }
    }
    worst
}

/// Evaluate semigroup decay along a time grid and fit the epsilon-exponent of
/// each requested space-time norm.
pub fn strichartz_probe(cfg: &ProbeConfig) -> Result<ProbeReport> {
    if cfg.eps_list.len() < 3 {
        return Err(Error::InvalidInput("probe needs at least 3 epsilon points".into()));
    }
    let wave_system = match cfg.system {
        SweepSystem::Pe => WaveSystem::Pe,
        SweepSystem::Rf => WaveSystem::Rf,
    };
    let grid = GridSpec::new([cfg.grid_n; 3], [cfg.period; 3], cfg.dealias_fraction)?;
    let mut warnings = Vec::new();
    // single-shell oscillating datum at 2^shell_j
    let spec = DataSpec {
        delta: match wave_system {
            WaveSystem::Pe => 1.0 / 6.0,
            WaveSystem::Rf => 0.25,
        },
        gamma: 1e-6, // datum amplitude fixed; the shell stays put
        alpha0: 1.0,
        c0: 1.0,
        c_lowfreq: 0.9,
        seed: cfg.seed,
        shell: ShellProfile::SingleShell,
        shell_base: (cfg.shell_j as f64).exp2(),
    };
    let datum = match wave_system {
        WaveSystem::Pe => make_osc_data_pe(&grid, &spec, 1.0, cfg.froude)?,
        WaveSystem::Rf => make_osc_data_rf(&grid, &spec, 1.0)?,
    };
    let radius = (cfg.shell_j as f64).exp2();
    let eps_min = cfg.eps_list.iter().copied().fold(f64::INFINITY, f64::min);
    let gmax = group_speed_bound(wave_system, cfg.froude, radius).max(1e-12);
    let wrap_cap = cfg.period * eps_min / (2.0 * gmax);
    let t_used = match cfg.t_max {
        Some(t) => {
            if t > wrap_cap {
                warnings.push(format!(
                    "requested horizon {t} exceeds the wrap-around cap {wrap_cap:.6}; capped"
                ));
            }
            t.min(wrap_cap)
        }
        None => wrap_cap,
    };
    let basis = WaveBasis::new(grid.clone(), cfg.froude, wave_system)?;
    let nsamp = cfg.num_samples.max(3);
    let mut rows = Vec::new();
    for &eps in &cfg.eps_list {
        let params = PhysParams::new(cfg.nu, cfg.nu, cfg.froude, eps)?;
        let times: Vec<f64> = (0..nsamp).map(|i| t_used * i as f64 / (nsamp - 1) as f64).collect();
        // per-norm spatial values at each sample
        let mut spatial: Vec<Vec<f64>> = vec![Vec::with_capacity(nsamp); cfg.norms.len()];
        for &t in &times {
            let f = semigroup_apply_with(&basis, &datum, t, &params)?;
            for (ni, norm) in cfg.norms.iter().enumerate() {
                let base = if norm.deriv != 0.0 {
                    crate::lp::fractional_derivative(&f, norm.deriv)
                } else {
                    f.clone()
                };
                let v = if norm.gradient {
                    let gx = base.derivative(0);
                    let gy = base.derivative(1);
                    let gz = base.derivative(2);
                    match norm.space {
                        ProbeSpace::Lebesgue { r } => lebesgue_norm_multi(&[&gx, &gy, &gz], r),
                        ProbeSpace::Aniso { a, b } => aniso_norm_multi(&[&gx, &gy, &gz], a, b),
                    }
                } else {
                    match norm.space {
                        ProbeSpace::Lebesgue { r } => lebesgue_norm_multi(&[&base], r),
                        ProbeSpace::Aniso { a, b } => aniso_norm_multi(&[&base], a, b),
                    }
                };
                spatial[ni].push(v);
            }
        }
        let mut values = BTreeMap::new();
        for (ni, norm) in cfg.norms.iter().enumerate() {
            let v = if norm.time_p.is_infinite() {
                spatial[ni].iter().copied().fold(0.0f64, f64::max)
            } else {
                let p = norm.time_p;
                let mut acc = 0.0;
                for i in 0..nsamp - 1 {
                    let h = times[i + 1] - times[i];
                    acc += 0.5 * h * (spatial[ni][i].powf(p) + spatial[ni][i + 1].powf(p));
                }
                acc.powf(1.0 / p)
            };
            values.insert(norm.name(), v);
        }
        rows.push(ProbeRow { eps, values });
    }
    let mut fits = Vec::new();
    for norm in &cfg.norms {
        let name = norm.name();
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| r.values.get(&name).map(|v| (r.eps, *v)))
            .filter(|(_, v)| *v > 0.0)
            .collect();
        if pts.len() < 3 {
            continue;
        }
        let fit = fit_power_law(&pts)?;
        let predicted = probe_predicted_exponent(wave_system, norm);
        fits.push(RateFit {
            norm: name,
            alpha: fit.alpha,
            prefactor: fit.prefactor,
            r2: fit.r2,
            predicted,
            discrepancy: predicted.map(|p| fit.alpha - p),
        });
    }
    Ok(ProbeReport { t_used, rows, fits, warnings })
}

/// Whole-space predictions: the epsilon gain of the dispersive estimates at
/// the best admissible interpolation weight.
fn probe_predicted_exponent(system: WaveSystem, norm: &ProbeNorm) -> Option<f64> {
    let p = norm.time_p;
    match (system, norm.space) {
        (WaveSystem::Pe, ProbeSpace::Lebesgue { r }) => {
            let x = 1.0 - 2.0 / r.min(1e300);
            if x <= 0.0 || p.is_infinite() {
                return Some(0.0);
            }
            let theta = (4.0 / (p * x)).min(1.0);
            Some(theta / 4.0 * x)
        }
        (WaveSystem::Rf, ProbeSpace::Lebesgue { r }) => {
            let x = 1.0 - 2.0 / r.min(1e300);
            if x <= 0.0 || p.is_infinite() {
                return Some(0.0);
            }
            let theta = (2.0 / (p * x)).min(1.0);
            Some(theta / 2.0 * x)
        }
        (WaveSystem::Rf, ProbeSpace::Aniso { a, b }) => {
            if b != 2.0 {
                return None;
            }
            let x = 1.0 - 2.0 / a.min(1e300);
            if x <= 0.0 || p.is_infinite() {
                return Some(0.0);
            }
            let theta = (4.0 / (p * x)).min(1.0);
            Some(theta / 4.0 * x)
        }
        (WaveSystem::Pe, ProbeSpace::Aniso { .. }) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{divergence, potential_vorticity};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn spec() -> DataSpec {
        DataSpec {
            delta: 1.0 / 6.0,
            gamma: 1.0 / 24.0,
            alpha0: 1.0,
            c0: 1.0,
            c_lowfreq: 0.9,
            seed: 11,
            shell: ShellProfile::SingleShell,
            shell_base: 0.5,
        }
    }

    fn grid16() -> Arc<GridSpec> {
        GridSpec::new([16, 16, 16], [4.0 * PI; 3], 2.0 / 3.0).unwrap()
    }

    #[test]
    fn data_spec_validation() {
        let mut s = spec();
        assert!(s.validate(WaveSystem::Pe).is_ok());
        s.gamma = s.delta; // gamma >= delta/2 rejected
        assert!(s.validate(WaveSystem::Pe).is_err());
        let mut s = spec();
        s.delta = 0.2; // above the primitive-system cap, fine for rotating
        assert!(s.validate(WaveSystem::Pe).is_err());
        assert!(s.validate(WaveSystem::Rf).is_ok());
        assert_relative_eq!(spec().eta0(), 0.25, max_relative = 1e-12);
    }

    #[test]
    fn osc_data_satisfies_hypotheses_exactly() {
        let g = grid16();
        let s = spec();
        let eps = 1e-2;
        let froude = 2.0;
        let u = make_osc_data_pe(&g, &s, eps, froude).unwrap();
        assert!(divergence(&u).unwrap().l2_norm() / u.l2_norm() < 1e-12);
        assert!(potential_vorticity(&u, froude).unwrap().l2_norm() / u.l2_norm() < 1e-12);
        let target = s.c0 * eps.powf(-s.gamma);
        assert_relative_eq!(sobolev_norm(&u, 0.5 + s.delta), target, max_relative = 1e-10);
        // single-shell scaling between intersection indices
        let j = s.shell_index(eps);
        let ratio = sobolev_norm(&u, 0.5 + s.c_lowfreq * s.delta) / sobolev_norm(&u, 0.5 + s.delta);
        let expect = ((-(j as f64)) * (1.0 - s.c_lowfreq) * s.delta).exp2();
        assert_relative_eq!(ratio, expect, max_relative = 1e-10);
    }

    #[test]
    fn osc_data_reports_grid_too_small() {
        let g = grid16();
        let mut s = spec();
        s.shell_base = 64.0; // shell far beyond a 16-point grid
        match make_osc_data_pe(&g, &s, 1e-2, 2.0) {
            Err(Error::GridTooSmall { required_n }) => assert!(required_n > 16),
            other => panic!("expected GridTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn qg_data_distance_and_projection() {
        let g = grid16();
        let s = spec();
        let froude = 2.0;
        for eps in [1e-1, 1e-2] {
            let (pert, limit) = make_qg_data(&g, &s, eps, froude).unwrap();
            for u in [&pert, &limit] {
                let osc = osc_project(u, froude).unwrap();
                assert!(osc.l2_norm() / u.l2_norm() < 1e-12);
            }
            let d = pert.sub(&limit);
            let dist = sobolev_norm(&d, 0.5).max(sobolev_norm(&d, 0.5 + s.delta));
            assert_relative_eq!(dist, s.c0 * eps.powf(s.alpha0), max_relative = 1e-10);
            let nl = sobolev_norm(&limit, 0.5).max(sobolev_norm(&limit, 0.5 + s.delta));
            assert_relative_eq!(nl, s.c0, max_relative = 1e-12);
        }
        // perturbation norm scales exactly like eps^alpha0
        let pts: Vec<(f64, f64)> = [1e-1, 1e-2, 1e-3]
            .iter()
            .map(|&e| {
                let (p, l) = make_qg_data(&g, &s, e, froude).unwrap();
                let d = p.sub(&l);
                (e, sobolev_norm(&d, 0.5).max(sobolev_norm(&d, 0.5 + s.delta)))
            })
            .collect();
        let fit = fit_power_law(&pts).unwrap();
        assert!((fit.alpha - s.alpha0).abs() < 1e-6);
    }

    #[test]
    fn power_law_fit_behaviour() {
        let pts: Vec<(f64, f64)> =
            [1.0, 0.1, 0.01].iter().map(|&e: &f64| (e, 3.0 * e.powf(0.7))).collect();
        let fit = fit_power_law(&pts).unwrap();
        assert_relative_eq!(fit.alpha, 0.7, max_relative = 1e-12);
        assert_relative_eq!(fit.prefactor, 3.0, max_relative = 1e-10);
        assert_relative_eq!(fit.r2, 1.0, epsilon = 1e-12);

        let flat: Vec<(f64, f64)> = [1.0, 0.1, 0.01].iter().map(|&e| (e, 2.5)).collect();
        let fit = fit_power_law(&flat).unwrap();
        assert!(fit.alpha.abs() < 1e-12);

        assert!(fit_power_law(&[(0.1, 1.0), (0.01, 2.0)]).is_err());
        assert!(fit_power_law(&[(0.1, 1.0), (0.01, -2.0), (0.001, 1.0)]).is_err());

        // rescaling values by a constant leaves the exponent unchanged
        let scaled: Vec<(f64, f64)> = pts.iter().map(|(e, v)| (*e, 17.0 * v)).collect();
        let fit2 = fit_power_law(&scaled).unwrap();
        assert!((fit2.alpha - 0.7).abs() < 1e-12);

        // 1% multiplicative noise moves a 5-point decade fit by < 0.02
        let noisy: Vec<(f64, f64)> = (0..5)
            .map(|i| {
                let e = 10f64.powi(-(i as i32));
                let wiggle = 1.0 + 0.01 * if i % 2 == 0 { 1.0 } else { -1.0 };
                (e, e.powf(0.4) * wiggle)
            })
            .collect();
        let fit3 = fit_power_law(&noisy).unwrap();
        assert!((fit3.alpha - 0.4).abs() <= 0.02);
    }

    #[test]
    fn ubar_data_is_divergence_free_with_exact_norm() {
        let g2 = Grid2::new([16, 16], [4.0 * PI; 2], 2.0 / 3.0).unwrap();
        let u = make_ubar_data(&g2, 1.5).unwrap();
        assert!(u.horizontal_divergence() / u.l2_norm() < 1e-12);
        assert_relative_eq!(u.l2_norm(), 1.5, max_relative = 1e-12);
    }

    #[test]
    fn probe_names_are_stable() {
        let n = ProbeNorm {
            time_p: 2.0,
            space: ProbeSpace::Lebesgue { r: f64::INFINITY },
            deriv: 0.0,
            gradient: false,
        };
        assert_eq!(n.name(), "L2t_Linf");
        let n = ProbeNorm {
            time_p: 2.0,
            space: ProbeSpace::Lebesgue { r: 3.0 },
            deriv: 0.0,
            gradient: true,
        };
        assert_eq!(n.name(), "L2t_grad_L3");
        let n = ProbeNorm {
            time_p: 4.0,
            space: ProbeSpace::Aniso { a: f64::INFINITY, b: 2.0 },
            deriv: 0.5,
            gradient: false,
        };
        assert_eq!(n.name(), "L4t_D0.5_Lhvinf_2");
    }

    #[test]
    fn small_pe_sweep_runs_and_is_reproducible() {
        let cfg = SweepConfig {
            system: SweepSystem::Pe,
            grid_n: 16,
            period: 4.0 * PI,
            dealias_fraction: 2.0 / 3.0,
            nu: 1.0,
            nu_prime: 1.0,
            froude: 2.0,
            data: spec(),
            eps_list: vec![1e-1, 10f64.powf(-1.5), 1e-2],
            t_end: 0.02,
            s_list: vec![0.5],
            dt_base: 5e-3,
            eps_dt_fraction: 0.5,
            observe_every: 1,
            eta_prime: None,
        };
        let r1 = epsilon_sweep(&cfg).unwrap();
        let r2 = epsilon_sweep(&cfg).unwrap();
        assert_eq!(r1.rows.len(), 3);
        assert!(r1.fits.iter().any(|f| f.norm == "energy_s_0.5"));
        // bitwise reproducibility of the rows
        let a = serde_json::to_string(&r1.rows).unwrap();
        let b = serde_json::to_string(&r2.rows).unwrap();
        assert_eq!(a, b);
        // predicted exponent for s = 1/2 is eta0 * delta = delta/4
        let fit = r1.fit("energy_s_0.5").unwrap();
        assert_relative_eq!(
            fit.predicted.unwrap(),
            spec().eta0() * spec().delta,
            max_relative = 1e-12
        );
    }
}
