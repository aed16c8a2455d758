//! Fourier-multiplier operators of rotating, stratified flow: the skew
//! rotation-stratification matrix, Leray projection, potential vorticity,
//! quasi-geostrophic / oscillating projectors, the anisotropic inverse
//! Laplacian and second-order diffusion, and the wave eigenbasis of the
//! penalized operator.

use crate::field::SpectralField;
use crate::grid::GridSpec;
use crate::par_zip;
use crate::{Error, Result};
use ndarray::{s, Array3, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Physical parameters: viscosities, Froude parameter and Rossby number.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PhysParams {
    /// Kinematic viscosity.
    pub nu: f64,
    /// Thermal diffusivity.
    pub nu_prime: f64,
    /// Froude parameter.
    pub froude: f64,
    /// Rossby number.
    pub eps: f64,
}

impl PhysParams {
    pub fn new(nu: f64, nu_prime: f64, froude: f64, eps: f64) -> Result<Self> {
        for (name, v) in [("nu", nu), ("nu_prime", nu_prime), ("froude", froude), ("eps", eps)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be strictly positive, got {v}")));
            }
        }
        Ok(PhysParams { nu, nu_prime, froude, eps })
    }

    /// F = 1 is the non-dispersive regime.
    pub fn is_dispersive(&self) -> bool {
        self.froude != 1.0
    }

    pub fn equal_viscosities(&self) -> bool {
        self.nu == self.nu_prime
    }

    /// nu_0 = min(nu, nu') entering the energy norm.
    pub fn nu_zero(&self) -> f64 {
        self.nu.min(self.nu_prime)
    }
}

fn expect_components(u: &SpectralField, c: usize) -> Result<()> {
    if u.components() != c {
        return Err(Error::ComponentMismatch { expected: c, got: u.components() });
    }
    Ok(())
}

/// Rotation-stratification matrix: `(v1, v2, v3, th) -> (-v2, v1, th/F, -v3/F)`.
pub fn apply_a(u: &SpectralField, froude: f64) -> Result<SpectralField> {
    expect_components(u, 4)?;
    let mut out = u.clone();
    let (mut a, mut b, mut c, mut d) = out
        .coeffs_mut()
        .multi_slice_mut((s![0, .., .., ..], s![1, .., .., ..], s![2, .., .., ..], s![3, .., .., ..]));
    par_zip!(Zip::from(&mut a).and(&mut b).and(&mut c).and(&mut d) => |v1, v2, v3, th| {
        let (a1, a2, a3, a4) = (-*v2, *v1, *th / froude, -*v3 / froude);
        *v1 = a1;
        *v2 = a2;
        *v3 = a3;
        *th = a4;
    });
    Ok(out)
}

/// Leray projection of the velocity part onto divergence-free fields;
/// for 4-component fields the fourth (temperature) component is untouched.
/// The `xi = 0` mode is left unchanged.
pub fn leray_project(u: &SpectralField) -> Result<SpectralField> {
    if u.components() < 3 {
        return Err(Error::ComponentMismatch { expected: 3, got: u.components() });
    }
    let grid = u.grid().clone();
    let mut out = u.clone();
    let (mut a, mut b, mut c) = out
        .coeffs_mut()
        .multi_slice_mut((s![0, .., .., ..], s![1, .., .., ..], s![2, .., .., ..]));
    par_zip!(Zip::indexed(&mut a).and(&mut b).and(&mut c) => |(i, j, k), v1, v2, v3| {
        let xi = grid.xi([i, j, k]);
        let k2 = xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
        if k2 > 0.0 {
            let dot = (xi[0] * *v1 + xi[1] * *v2 + xi[2] * *v3) / k2;
            *v1 -= xi[0] * dot;
            *v2 -= xi[1] * dot;
            *v3 -= xi[2] * dot;
        }
    });
    Ok(out)
}

/// Divergence of the velocity part (first three components), as a scalar field.
pub fn divergence(u: &SpectralField) -> Result<SpectralField> {
    if u.components() < 3 {
        return Err(Error::ComponentMismatch { expected: 3, got: u.components() });
    }
    let grid = u.grid().clone();
    let mut out = SpectralField::zeros(grid.clone(), 1)?;
    let coeffs = u.coeffs();
    let (v1, v2, v3) =
        (coeffs.slice(s![0, .., .., ..]), coeffs.slice(s![1, .., .., ..]), coeffs.slice(s![2, .., .., ..]));
    let mut d = out.coeffs_mut().index_axis_mut(ndarray::Axis(0), 0);
    par_zip!(Zip::indexed(&mut d).and(&v1).and(&v2).and(&v3) => |(i, j, k), d, a, b, c| {
        let xi = grid.xi([i, j, k]);
        *d = Complex64::new(0.0, 1.0) * (xi[0] * a + xi[1] * b + xi[2] * c);
    });
    Ok(out)
}

/// Potential vorticity `Omega(U) = d1 v2 - d2 v1 - F d3 th`.
pub fn potential_vorticity(u: &SpectralField, froude: f64) -> Result<SpectralField> {
    expect_components(u, 4)?;
    let grid = u.grid().clone();
    let mut out = SpectralField::zeros(grid.clone(), 1)?;
    let coeffs = u.coeffs();
    let (v1, v2, th) =
        (coeffs.slice(s![0, .., .., ..]), coeffs.slice(s![1, .., .., ..]), coeffs.slice(s![3, .., .., ..]));
    let mut w = out.coeffs_mut().index_axis_mut(ndarray::Axis(0), 0);
    par_zip!(Zip::indexed(&mut w).and(&v1).and(&v2).and(&th) => |(i, j, k), w, a, b, t| {
        let xi = grid.xi([i, j, k]);
        *w = Complex64::new(0.0, 1.0) * (xi[0] * b - xi[1] * a - froude * xi[2] * t);
    });
    Ok(out)
}

#[inline]
fn xi_f_sq(xi: [f64; 3], froude: f64) -> f64 {
    xi[0] * xi[0] + xi[1] * xi[1] + froude * froude * xi[2] * xi[2]
}

/// Inverse of the anisotropic Laplacian `Delta_F = d1^2 + d2^2 + F^2 d3^2`;
/// the `xi = 0` coefficient is set to zero.
pub fn delta_f_inverse(w: &SpectralField, froude: f64) -> Result<SpectralField> {
    expect_components(w, 1)?;
    let mut out = w.clone();
    out.apply_multiplier(|xi| {
        let s = xi_f_sq(xi, froude);
        if s > 0.0 {
            Complex64::new(-1.0 / s, 0.0)
        } else {
            Complex64::ZERO
        }
    });
    Ok(out)
}

/// Anisotropic Laplacian `Delta_F` as a multiplier.
pub fn delta_f_apply(w: &SpectralField, froude: f64) -> Result<SpectralField> {
    expect_components(w, 1)?;
    let mut out = w.clone();
    out.apply_multiplier(|xi| Complex64::new(-xi_f_sq(xi, froude), 0.0));
    Ok(out)
}

/// Biot-Savart reconstruction of a quasi-geostrophic field from a scalar
/// potential vorticity: `U = (-d2, d1, 0, -F d3) Delta_F^{-1} omega`.
pub fn qg_from_vorticity(omega: &SpectralField, froude: f64) -> Result<SpectralField> {
    expect_components(omega, 1)?;
    let grid = omega.grid().clone();
    let mut out = SpectralField::zeros(grid.clone(), 4)?;
    let om = omega.coeffs().index_axis(ndarray::Axis(0), 0);
    let (mut a, mut b, mut c, mut d) = out
        .coeffs_mut()
        .multi_slice_mut((s![0, .., .., ..], s![1, .., .., ..], s![2, .., .., ..], s![3, .., .., ..]));
    par_zip!(Zip::indexed(&mut a).and(&mut b).and(&mut c).and(&mut d).and(&om) => |(i, j, k), v1, v2, v3, th, w| {
        let xi = grid.xi([i, j, k]);
        let s = xi_f_sq(xi, froude);
        if s > 0.0 {
            let iw = Complex64::new(0.0, 1.0) * w / s;
            *v1 = xi[1] * iw;
            *v2 = -xi[0] * iw;
            *v3 = Complex64::ZERO;
            *th = froude * xi[2] * iw;
        } else {
            *v1 = Complex64::ZERO;
            *v2 = Complex64::ZERO;
            *v3 = Complex64::ZERO;
            *th = Complex64::ZERO;
        }
    });
    Ok(out)
}

/// Quasi-geostrophic projection `Q(U)`.
pub fn qg_project(u: &SpectralField, froude: f64) -> Result<SpectralField> {
    let omega = potential_vorticity(u, froude)?;
    qg_from_vorticity(&omega, froude)
}

/// Oscillating projection `P(U) = U - Q(U)`.
pub fn osc_project(u: &SpectralField, froude: f64) -> Result<SpectralField> {
    Ok(u.sub(&qg_project(u, froude)?))
}

/// Symbol of the diffusion operator
/// `Gamma = Delta Delta_F^{-1} (nu d1^2 + nu d2^2 + nu' F^2 d3^2)`,
/// equal to `nu Delta` when `nu = nu'`. Zero at `xi = 0`.
pub fn gamma_symbol(grid: &GridSpec, params: &PhysParams) -> Array3<f64> {
    let [n1, n2, n3] = grid.n();
    let f2 = params.froude * params.froude;
    Array3::from_shape_fn((n1, n2, n3), |(i, j, k)| {
        let xi = grid.xi([i, j, k]);
        let kf2 = xi_f_sq(xi, params.froude);
        if kf2 > 0.0 {
            let k2 = xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
            let num = params.nu * (xi[0] * xi[0] + xi[1] * xi[1]) + params.nu_prime * f2 * xi[2] * xi[2];
            -k2 * num / kf2
        } else {
            0.0
        }
    })
}

/// Heat symbol `-nu |xi|^2`.
pub fn heat_symbol(grid: &GridSpec, nu: f64) -> Array3<f64> {
    let [n1, n2, n3] = grid.n();
    Array3::from_shape_fn((n1, n2, n3), |(i, j, k)| {
        let xi = grid.xi([i, j, k]);
        -nu * (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2])
    })
}

/// Apply `Gamma` to all components.
pub fn gamma_apply(u: &SpectralField, params: &PhysParams) -> SpectralField {
    let sym = gamma_symbol(u.grid(), params);
    let mut out = u.clone();
    for c in 0..out.components() {
        let mut comp = out.coeffs_mut().index_axis_mut(ndarray::Axis(0), c);
        par_zip!(Zip::from(&mut comp).and(&sym) => |z, s| { *z *= *s; });
    }
    out
}

/// Which penalized skew operator the wave basis diagonalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WaveSystem {
    /// Primitive equations: `P A` on divergence-free 4-vectors, frequencies
    /// `|xi|_F / (F |xi|)`.
    Pe,
    /// Rotating fluids: `P (e3 x .)` on divergence-free 3-vectors,
    /// frequencies `|xi_3| / |xi|`.
    Rf,
}

enum BasisData {
    Pe { e_zero: Array3<[f64; 4]>, e_plus: Array3<[Complex64; 4]> },
    Rf { e_plus: Array3<[Complex64; 3]> },
}

/// Per-wavevector eigenstructure of the penalized operator restricted to the
/// divergence-free subspace: a zero-frequency direction (quasi-geostrophic,
/// PE only), and a conjugate pair of oscillatory directions with frequencies
/// `±omega(xi)`. Computed numerically per mode and validated against the
/// closed-form frequencies during construction.
pub struct WaveBasis {
    grid: Arc<GridSpec>,
    system: WaveSystem,
    froude: f64,
    freq: Array3<f64>,
    data: BasisData,
}

/// Orthonormal pair perpendicular to a unit vector, chosen against the least
/// aligned coordinate axis so the construction stays stable on degenerate rays.
fn orthonormal_pair(unit: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let a = {
        let abs = [unit[0].abs(), unit[1].abs(), unit[2].abs()];
        let mut best = 0;
        for i in 1..3 {
            if abs[i] < abs[best] {
                best = i;
            }
        }
        let mut e = [0.0; 3];
        e[best] = 1.0;
        e
    };
    let mut u = cross(unit, a);
    let n = norm3(u);
    for x in u.iter_mut() {
        *x /= n;
    }
    let v = cross(unit, u);
    (u, v)
}

#[inline]
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
fn norm3(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

const FREQ_VALIDATION_TOL: f64 = 1e-10;

impl WaveBasis {
    pub fn new(grid: Arc<GridSpec>, froude: f64, system: WaveSystem) -> Result<Self> {
        if !(froude > 0.0) {
            return Err(Error::InvalidInput(format!("froude must be positive, got {froude}")));
        }
        let [n1, n2, n3] = grid.n();
        let mut freq = Array3::zeros((n1, n2, n3));
        let data = match system {
            WaveSystem::Pe => {
                let mut e_zero = Array3::from_elem((n1, n2, n3), [0.0f64; 4]);
                let mut e_plus = Array3::from_elem((n1, n2, n3), [Complex64::ZERO; 4]);
                let mut failure = None;
                {
                    let grid = &grid;
                    let fail = &mut failure;
                    Zip::indexed(&mut freq).and(&mut e_zero).and(&mut e_plus).for_each(
                        |(i, j, k), w, ez, ep| {
                            if (i, j, k) == (0, 0, 0) {
                                return;
                            }
                            let xi = grid.xi([i, j, k]);
                            match pe_mode_basis(xi, froude) {
                                Ok((omega, z, p)) => {
                                    *w = omega;
                                    *ez = z;
                                    *ep = p;
                                }
                                Err(e) => {
                                    if fail.is_none() {
                                        *fail = Some(e);
                                    }
                                }
                            }
                        },
                    );
                }
                if let Some(e) = failure {
                    return Err(e);
                }
                BasisData::Pe { e_zero, e_plus }
            }
            WaveSystem::Rf => {
                let mut e_plus = Array3::from_elem((n1, n2, n3), [Complex64::ZERO; 3]);
                let mut failure = None;
                {
                    let grid = &grid;
                    let fail = &mut failure;
                    Zip::indexed(&mut freq).and(&mut e_plus).for_each(|(i, j, k), w, ep| {
                        if (i, j, k) == (0, 0, 0) {
                            return;
                        }
                        let xi = grid.xi([i, j, k]);
                        match rf_mode_basis(xi) {
                            Ok((omega, p)) => {
                                *w = omega;
                                *ep = p;
                            }
                            Err(e) => {
                                if fail.is_none() {
                                    *fail = Some(e);
                                }
                            }
                        }
                    });
                }
                if let Some(e) = failure {
                    return Err(e);
                }
                BasisData::Rf { e_plus }
            }
        };
        Ok(WaveBasis { grid, system, froude, freq, data })
    }

    pub fn system(&self) -> WaveSystem {
        self.system
    }

    pub fn froude(&self) -> f64 {
        self.froude
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    /// Nonnegative eigenfrequency per mode (zero at `xi = 0`).
    pub fn frequencies(&self) -> &Array3<f64> {
        &self.freq
    }

    fn components(&self) -> usize {
        match self.system {
            WaveSystem::Pe => 4,
            WaveSystem::Rf => 3,
        }
    }

    /// Apply the exact linear flow
    /// `exp(t * heat_symbol) * exp(-(t/eps) * skew)` mode by mode: the
    /// zero-frequency component is only diffused, the oscillatory pair picks
    /// up conjugate phases `exp(∓ i omega t/eps)`. The input is implicitly
    /// projected onto the divergence-free subspace; the mean mode is copied
    /// unchanged.
    pub fn apply_flow(
        &self,
        u: &SpectralField,
        heat: &Array3<f64>,
        t: f64,
        t_over_eps: f64,
    ) -> Result<SpectralField> {
        expect_components(u, self.components())?;
        if *u.grid().as_ref() != *self.grid {
            return Err(Error::GridMismatch);
        }
        let mut out = u.clone();
        match &self.data {
            BasisData::Pe { e_zero, e_plus } => {
                let (mut a, mut b, mut c, mut d) = out.coeffs_mut().multi_slice_mut((
                    s![0, .., .., ..],
                    s![1, .., .., ..],
                    s![2, .., .., ..],
                    s![3, .., .., ..],
                ));
                // Zip supports at most 6 producers; fold (freq, heat, e0, e+)
                // lookups through indexed access on captured refs.
                let freq = &self.freq;
                par_zip!(Zip::indexed(&mut a).and(&mut b).and(&mut c).and(&mut d) => |(i, j, k), v1, v2, v3, th| {
                    if (i, j, k) == (0, 0, 0) {
                        return;
                    }
                    let idx = (i, j, k);
                    let hz = (t * heat[idx]).exp();
                    let omega = freq[idx];
                    let ez = e_zero[idx];
                    let ep = e_plus[idx];
                    let uvec = [*v1, *v2, *v3, *th];
                    let a0: Complex64 = (0..4).map(|m| ez[m] * uvec[m]).sum();
                    let ap: Complex64 = (0..4).map(|m| ep[m].conj() * uvec[m]).sum();
                    let am: Complex64 = (0..4).map(|m| ep[m] * uvec[m]).sum();
                    let ph = Complex64::from_polar(1.0, -omega * t_over_eps);
                    let (cp, cm) = (ap * ph, am * ph.conj());
                    let mut res = [Complex64::ZERO; 4];
                    for m in 0..4 {
                        res[m] = hz * (a0 * ez[m] + cp * ep[m] + cm * ep[m].conj());
                    }
                    *v1 = res[0];
                    *v2 = res[1];
                    *v3 = res[2];
                    *th = res[3];
                });
            }
            BasisData::Rf { e_plus } => {
                let (mut a, mut b, mut c) = out.coeffs_mut().multi_slice_mut((
                    s![0, .., .., ..],
                    s![1, .., .., ..],
                    s![2, .., .., ..],
                ));
                let freq = &self.freq;
                par_zip!(Zip::indexed(&mut a).and(&mut b).and(&mut c) => |(i, j, k), v1, v2, v3| {
                    if (i, j, k) == (0, 0, 0) {
                        return;
                    }
                    let idx = (i, j, k);
                    let hz = (t * heat[idx]).exp();
                    let omega = freq[idx];
                    let ep = e_plus[idx];
                    let uvec = [*v1, *v2, *v3];
                    let ap: Complex64 = (0..3).map(|m| ep[m].conj() * uvec[m]).sum();
                    let am: Complex64 = (0..3).map(|m| ep[m] * uvec[m]).sum();
                    let ph = Complex64::from_polar(1.0, -omega * t_over_eps);
                    let (cp, cm) = (ap * ph, am * ph.conj());
                    let mut res = [Complex64::ZERO; 3];
                    for m in 0..3 {
                        res[m] = hz * (cp * ep[m] + cm * ep[m].conj());
                    }
                    *v1 = res[0];
                    *v2 = res[1];
                    *v3 = res[2];
                });
            }
        }
        Ok(out)
    }

    /// Projection onto one eigendirection: -1, 0, +1 select the frequency
    /// `-omega`, `0`, `+omega` subspaces. The mean mode maps to zero.
    pub fn project(&self, u: &SpectralField, which: i32) -> Result<SpectralField> {
        expect_components(u, self.components())?;
        let mut out = SpectralField::zeros(self.grid.clone(), self.components())?;
        match &self.data {
            BasisData::Pe { e_zero, e_plus } => {
                let coeffs = u.coeffs();
                let (u1, u2, u3, u4) = (
                    coeffs.slice(s![0, .., .., ..]),
                    coeffs.slice(s![1, .., .., ..]),
                    coeffs.slice(s![2, .., .., ..]),
                    coeffs.slice(s![3, .., .., ..]),
                );
                let (mut a, mut b, mut c, mut d) = out.coeffs_mut().multi_slice_mut((
                    s![0, .., .., ..],
                    s![1, .., .., ..],
                    s![2, .., .., ..],
                    s![3, .., .., ..],
                ));
                par_zip!(Zip::indexed(&mut a).and(&mut b).and(&mut c).and(&mut d) => |(i, j, k), v1, v2, v3, th| {
                    if (i, j, k) == (0, 0, 0) {
                        return;
                    }
                    let idx = (i, j, k);
                    let uvec = [u1[idx], u2[idx], u3[idx], u4[idx]];
                    let ez = e_zero[idx];
                    let ep = e_plus[idx];
                    let mut res = [Complex64::ZERO; 4];
                    match which {
                        0 => {
                            let a0: Complex64 = (0..4).map(|m| ez[m] * uvec[m]).sum();
                            for m in 0..4 {
                                res[m] = a0 * ez[m];
                            }
                        }
                        1 => {
                            let ap: Complex64 = (0..4).map(|m| ep[m].conj() * uvec[m]).sum();
                            for m in 0..4 {
                                res[m] = ap * ep[m];
                            }
                        }
                        _ => {
                            let am: Complex64 = (0..4).map(|m| ep[m] * uvec[m]).sum();
                            for m in 0..4 {
                                res[m] = am * ep[m].conj();
                            }
                        }
                    }
                    *v1 = res[0];
                    *v2 = res[1];
                    *v3 = res[2];
                    *th = res[3];
                });
            }
            BasisData::Rf { e_plus } => {
                let coeffs = u.coeffs();
                let (u1, u2, u3) = (
                    coeffs.slice(s![0, .., .., ..]),
                    coeffs.slice(s![1, .., .., ..]),
                    coeffs.slice(s![2, .., .., ..]),
                );
                let (mut a, mut b, mut c) = out.coeffs_mut().multi_slice_mut((
                    s![0, .., .., ..],
                    s![1, .., .., ..],
                    s![2, .., .., ..],
                ));
                par_zip!(Zip::indexed(&mut a).and(&mut b).and(&mut c) => |(i, j, k), v1, v2, v3| {
                    if (i, j, k) == (0, 0, 0) {
                        return;
                    }
                    let idx = (i, j, k);
                    let uvec = [u1[idx], u2[idx], u3[idx]];
                    let ep = e_plus[idx];
                    let mut res = [Complex64::ZERO; 3];
                    match which {
                        0 => {}
                        1 => {
                            let ap: Complex64 = (0..3).map(|m| ep[m].conj() * uvec[m]).sum();
                            for m in 0..3 {
                                res[m] = ap * ep[m];
                            }
                        }
                        _ => {
                            let am: Complex64 = (0..3).map(|m| ep[m] * uvec[m]).sum();
                            for m in 0..3 {
                                res[m] = am * ep[m].conj();
                            }
                        }
                    }
                    *v1 = res[0];
                    *v2 = res[1];
                    *v3 = res[2];
                });
            }
        }
        Ok(out)
    }
}

/// Eigenstructure of `P A` restricted to `{(v, th) : xi . v = 0}` at one mode.
/// The restricted matrix in an orthonormal basis of the constraint space is a
/// real skew-symmetric 3x3, i.e. a cross product with some axis vector `m`;
/// its eigenpairs are `(0, m/|m|)` and `(±i |m|, (u ∓ i v)/sqrt(2))`.
fn pe_mode_basis(xi: [f64; 3], froude: f64) -> Result<(f64, [f64; 4], [Complex64; 4])> {
    let kn = norm3(xi);
    let unit = [xi[0] / kn, xi[1] / kn, xi[2] / kn];
    let (h1, h2) = orthonormal_pair(unit);
    // basis of the constraint space: (h1, 0), (h2, 0), (0, 0, 0, 1)
    let basis: [[f64; 4]; 3] =
        [[h1[0], h1[1], h1[2], 0.0], [h2[0], h2[1], h2[2], 0.0], [0.0, 0.0, 0.0, 1.0]];
    let a_mat = |v: [f64; 4]| [-v[1], v[0], v[3] / froude, -v[2] / froude];
    let mut m = [[0.0f64; 3]; 3];
    for (col, bc) in basis.iter().enumerate() {
        let av = a_mat(*bc);
        for (row, br) in basis.iter().enumerate() {
            m[row][col] = (0..4).map(|i| br[i] * av[i]).sum();
        }
    }
    // skew-symmetrize against roundoff and read off the axis vector
    let axis = [
        0.5 * (m[2][1] - m[1][2]),
        0.5 * (m[0][2] - m[2][0]),
        0.5 * (m[1][0] - m[0][1]),
    ];
    let omega = norm3(axis);
    let expected = xi_f_sq(xi, froude).sqrt() / (froude * kn);
    if (omega - expected).abs() > FREQ_VALIDATION_TOL {
        return Err(Error::EigenFailure {
            xi,
            detail: format!("computed frequency {omega}, closed form {expected}"),
        });
    }
    let ez3 = [axis[0] / omega, axis[1] / omega, axis[2] / omega];
    let (u3, v3) = orthonormal_pair(ez3);
    let lift = |c: [f64; 3]| -> [f64; 4] {
        let mut out = [0.0f64; 4];
        for i in 0..4 {
            out[i] = c[0] * basis[0][i] + c[1] * basis[1][i] + c[2] * basis[2][i];
        }
        out
    };
    let ez = lift(ez3);
    let ur = lift(u3);
    let vr = lift(v3);
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut ep = [Complex64::ZERO; 4];
    for i in 0..4 {
        ep[i] = Complex64::new(ur[i] * inv_sqrt2, -vr[i] * inv_sqrt2);
    }
    Ok((omega, ez, ep))
}

/// Eigenstructure of `P (e3 x .)` restricted to `{v : xi . v = 0}` at one
/// mode: a 2x2 real skew restriction with eigenvalues `±i |xi_3|/|xi|`.
fn rf_mode_basis(xi: [f64; 3]) -> Result<(f64, [Complex64; 3])> {
    let kn = norm3(xi);
    let unit = [xi[0] / kn, xi[1] / kn, xi[2] / kn];
    let (h1, h2) = orthonormal_pair(unit);
    let e3_cross = |v: [f64; 3]| [-v[1], v[0], 0.0];
    let w = {
        let a = e3_cross(h1);
        let m21: f64 = (0..3).map(|i| h2[i] * a[i]).sum();
        let b = e3_cross(h2);
        let m12: f64 = (0..3).map(|i| h1[i] * b[i]).sum();
        0.5 * (m21 - m12)
    };
    let omega = w.abs();
    let expected = xi[2].abs() / kn;
    if (omega - expected).abs() > FREQ_VALIDATION_TOL {
        return Err(Error::EigenFailure {
            xi,
            detail: format!("computed frequency {omega}, closed form {expected}"),
        });
    }
    let sgn = if w < 0.0 { 1.0 } else { -1.0 };
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut ep = [Complex64::ZERO; 3];
    for i in 0..3 {
        ep[i] = Complex64::new(h1[i] * inv_sqrt2, sgn * h2[i] * inv_sqrt2);
    }
    Ok((omega, ep))
}

/// L2 inner product of two real fields via Parseval.
pub fn inner_l2(a: &SpectralField, b: &SpectralField) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.coeffs().iter().zip(b.coeffs().iter()) {
        s += (x.conj() * y).re;
    }
    a.grid().volume() * s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::random_real_field;
    use approx::assert_relative_eq;
    use ndarray::Array4;
    use std::f64::consts::PI;

    fn grid() -> Arc<GridSpec> {
        GridSpec::new([16, 16, 16], [2.0 * PI; 3], 2.0 / 3.0).unwrap()
    }

    fn rel(a: &SpectralField, b: &SpectralField) -> f64 {
        a.sub(b).l2_norm() / b.l2_norm().max(1e-300)
    }

    #[test]
    fn a_matrix_rows() {
        let g = grid();
        let mut s = Array4::zeros((4, 16, 16, 16));
        s.index_axis_mut(ndarray::Axis(0), 0).fill(1.0);
        let u = SpectralField::transform_forward(g.clone(), &s).unwrap();
        let au = apply_a(&u, 2.0).unwrap();
        assert_relative_eq!(au.mean(1).re, 1.0, max_relative = 1e-13);
        assert!(au.mean(0).norm() < 1e-13 && au.mean(2).norm() < 1e-13);

        let mut s = Array4::zeros((4, 16, 16, 16));
        s.index_axis_mut(ndarray::Axis(0), 2).fill(1.0);
        let u = SpectralField::transform_forward(g, &s).unwrap();
        let au = apply_a(&u, 1.0).unwrap();
        assert_relative_eq!(au.mean(3).re, -1.0, max_relative = 1e-13);
    }

    #[test]
    fn a_is_skew() {
        let g = grid();
        let u = random_real_field(&g, 4, 42);
        let au = apply_a(&u, 0.7).unwrap();
        assert!(inner_l2(&au, &u).abs() / (u.l2_norm() * u.l2_norm()) < 1e-13);
    }

    #[test]
    fn leray_kills_gradients_and_is_idempotent() {
        let g = grid();
        let p = random_real_field(&g, 1, 5);
        let grad = SpectralField::from_components(&[&p.derivative(0), &p.derivative(1), &p.derivative(2)])
            .unwrap();
        let proj = leray_project(&grad).unwrap();
        assert!(proj.l2_norm() / grad.l2_norm() < 1e-13);

        let u = random_real_field(&g, 3, 6);
        let pu = leray_project(&u).unwrap();
        let ppu = leray_project(&pu).unwrap();
        assert!(rel(&ppu, &pu) < 1e-12);
        assert!(divergence(&pu).unwrap().l2_norm() / pu.l2_norm() < 1e-12);
        // divergence-free input unchanged
        assert!(rel(&leray_project(&pu).unwrap(), &pu) < 1e-12);
    }

    #[test]
    fn vorticity_of_biot_savart_is_identity() {
        let g = grid();
        let froude = 1.7;
        let mut om = random_real_field(&g, 1, 9);
        om.coeffs_mut()[[0, 0, 0, 0]] = Complex64::ZERO;
        let u = qg_from_vorticity(&om, froude).unwrap();
        let om2 = potential_vorticity(&u, froude).unwrap();
        assert!(rel(&om2, &om) < 1e-12);
    }

    #[test]
    fn vorticity_of_oscillating_part_vanishes() {
        let g = grid();
        let u = random_real_field(&g, 4, 10);
        let p = osc_project(&u, 0.8).unwrap();
        let om = potential_vorticity(&p, 0.8).unwrap();
        assert!(om.l2_norm() / u.l2_norm() < 1e-12);
    }

    #[test]
    fn qg_projector_algebra() {
        let g = grid();
        let froude = 2.0;
        let u = random_real_field(&g, 4, 11);
        let q = qg_project(&u, froude).unwrap();
        let p = osc_project(&u, froude).unwrap();
        assert!(rel(&qg_project(&q, froude).unwrap(), &q) < 1e-12);
        assert!(rel(&q.add(&p), &u) < 1e-13);
        let dot = inner_l2(&q, &p);
        assert!(dot.abs() / (q.l2_norm() * p.l2_norm()) < 1e-12);
        // QG velocity is divergence-free
        assert!(divergence(&q).unwrap().l2_norm() / q.l2_norm() < 1e-12);
    }

    #[test]
    fn delta_f_inverse_inverts_on_mean_free() {
        let g = grid();
        let froude = 2.0;
        let mut w = random_real_field(&g, 1, 12);
        w.coeffs_mut()[[0, 0, 0, 0]] = Complex64::ZERO;
        let inv = delta_f_inverse(&w, froude).unwrap();
        let back = delta_f_apply(&inv, froude).unwrap();
        assert!(rel(&back, &w) < 1e-12);
    }

    #[test]
    fn delta_f_single_mode_symbol() {
        let g = grid();
        let mut w = SpectralField::zeros(g, 1).unwrap();
        // xi = (0, 0, 1), F = 2: symbol -(0 + 0 + 4) = -4
        w.coeffs_mut()[[0, 0, 0, 1]] = Complex64::new(1.0, 0.0);
        w.coeffs_mut()[[0, 0, 0, 15]] = Complex64::new(1.0, 0.0);
        let inv = delta_f_inverse(&w, 2.0).unwrap();
        assert_relative_eq!(inv.coeffs()[[0, 0, 0, 1]].re, -0.25, max_relative = 1e-13);
    }

    #[test]
    fn gamma_equals_nu_laplacian_when_viscosities_match() {
        let g = grid();
        let params = PhysParams::new(0.3, 0.3, 2.0, 0.1).unwrap();
        let u = random_real_field(&g, 4, 13);
        let gu = gamma_apply(&u, &params);
        let mut lap = u.clone();
        lap.apply_multiplier(|xi| {
            Complex64::new(-params.nu * (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]), 0.0)
        });
        assert!(rel(&gu, &lap) < 1e-13);
    }

    #[test]
    fn gamma_single_mode_and_sign() {
        let g = grid();
        let params = PhysParams::new(0.4, 0.9, 2.0, 0.1).unwrap();
        let sym = gamma_symbol(&g, &params);
        // xi = (1, 0, 0): -1 * (nu * 1) / 1 = -nu
        assert_relative_eq!(sym[[1, 0, 0]], -params.nu, max_relative = 1e-13);
        let u = random_real_field(&g, 4, 14);
        let gu = gamma_apply(&u, &params);
        assert!(inner_l2(&gu, &u) <= 1e-10);
    }

    #[test]
    fn pe_wave_basis_frequencies_and_projectors() {
        let g = grid();
        for froude in [0.5, 1.0, 2.0] {
            let wb = WaveBasis::new(g.clone(), froude, WaveSystem::Pe).unwrap();
            // closed form validated inside the constructor; spot-check F = 1
            if froude == 1.0 {
                let f = wb.frequencies();
                for ((i, j, k), w) in f.indexed_iter() {
                    if (i, j, k) != (0, 0, 0) {
                        assert!((w - 1.0).abs() < 1e-12);
                    }
                }
            }
            let u = leray_project(&random_real_field(&g, 4, 21)).unwrap();
            let p0 = wb.project(&u, 0).unwrap();
            let pp = wb.project(&u, 1).unwrap();
            let pm = wb.project(&u, -1).unwrap();
            let sum = p0.add(&pp).add(&pm);
            // resolution of identity on the divergence-free subspace
            // (mean mode projects to zero by convention)
            let mut un = u.clone();
            un.coeffs_mut().slice_mut(s![.., 0, 0, 0]).fill(Complex64::ZERO);
            assert!(rel(&sum, &un) < 1e-12);
            // mutual orthogonality: P+ of P0 etc. vanish
            assert!(wb.project(&p0, 1).unwrap().l2_norm() / u.l2_norm() < 1e-12);
            assert!(wb.project(&pp, -1).unwrap().l2_norm() / u.l2_norm() < 1e-12);
            assert!(rel(&wb.project(&pp, 1).unwrap(), &pp) < 1e-12);
        }
    }

    #[test]
    fn rf_axis_modes_have_unit_frequency() {
        let g = grid();
        let wb = WaveBasis::new(g, 1.0, WaveSystem::Rf).unwrap();
        let f = wb.frequencies();
        assert_relative_eq!(f[[0, 0, 3]], 1.0, max_relative = 1e-12);
        assert_relative_eq!(f[[0, 0, 13]], 1.0, max_relative = 1e-12);
        // horizontal modes are degenerate
        assert!(f[[2, 1, 0]].abs() < 1e-12);
    }

    #[test]
    fn penalized_operator_kills_qg_part() {
        let g = grid();
        let froude = 2.0;
        let u = random_real_field(&g, 4, 31);
        let q = qg_project(&u, froude).unwrap();
        let paq = leray_project(&apply_a(&q, froude).unwrap()).unwrap();
        assert!(paq.l2_norm() / q.l2_norm() < 1e-12);
        // and Q of P A U vanishes for divergence-free U
        let du = leray_project(&u).unwrap();
        let pau = leray_project(&apply_a(&du, froude).unwrap()).unwrap();
        let qpau = qg_project(&pau, froude).unwrap();
        assert!(qpau.l2_norm() / u.l2_norm() < 1e-12);
        // skew-symmetry survives projection
        assert!(inner_l2(&pau, &du).abs() / (du.l2_norm() * du.l2_norm()) < 1e-12);
    }

    #[test]
    fn pe_zero_frequency_space_is_qg() {
        let g = grid();
        let froude = 0.5;
        let wb = WaveBasis::new(g.clone(), froude, WaveSystem::Pe).unwrap();
        let u = leray_project(&random_real_field(&g, 4, 33)).unwrap();
        let p0 = wb.project(&u, 0).unwrap();
        // zero-frequency component coincides with the QG projection
        let q = qg_project(&u, froude).unwrap();
        assert!(rel(&p0, &q) < 1e-11);
    }
}
