//! Right-hand sides for every evolution system: the primitive equations,
//! their quasi-geostrophic limit with the wave forcing `G`, the homogeneous
//! and inhomogeneous linear oscillating flows, the primitive error system
//! with its ten source terms; and on the rotating-fluids side the 2D
//! Navier-Stokes flow, the perturbed/linear rotating systems and the error
//! system with its eight source terms.

use crate::field::SpectralField;
use crate::grid::GridSpec;
use crate::ops::{
    apply_a, gamma_apply, leray_project, osc_project, potential_vorticity, qg_project, PhysParams,
};
use crate::par_zip;
use crate::{Error, Result};
use ndarray::{s, Array2, Array3, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Tags for the systems the time stepper can advance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Pe,
    Qg,
    WH,
    WInh,
    DeltaPe,
    Rf,
    Ns2d,
    Prf,
    Lrf,
    DeltaRf,
}

impl SystemKind {
    /// Number of field components carried by the evolved state.
    pub fn components(&self) -> usize {
        match self {
            SystemKind::Pe | SystemKind::Qg | SystemKind::WH | SystemKind::WInh | SystemKind::DeltaPe => 4,
            SystemKind::Rf | SystemKind::Prf | SystemKind::Lrf | SystemKind::DeltaRf => 3,
            SystemKind::Ns2d => 3,
        }
    }
}

fn same_grid(a: &SpectralField, b: &SpectralField) -> Result<()> {
    if **a.grid() != **b.grid() {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

/// Pseudo-spectral convective term `a . grad b` (advecting velocity = first
/// three components of `a`): inverse transform, pointwise products, forward
/// transform, dealias. The mean mode of the result is zeroed; it vanishes
/// analytically for divergence-free `a` and the solvers keep the mean frozen.
pub fn convective_term(a: &SpectralField, b: &SpectralField) -> Result<SpectralField> {
    if a.components() < 3 {
        return Err(Error::ComponentMismatch { expected: 3, got: a.components() });
    }
    same_grid(a, b)?;
    let grid = b.grid().clone();
    let vel: [Array3<f64>; 3] =
        [a.component_physical(0), a.component_physical(1), a.component_physical(2)];
    let mut out = SpectralField::zeros(grid, b.components())?;
    let mut acc = Array3::<f64>::zeros(vel[0].raw_dim());
    for c in 0..b.components() {
        acc.fill(0.0);
        for (axis, v) in vel.iter().enumerate() {
            let db = b.derivative(axis).component_physical(c);
            par_zip!(Zip::from(&mut acc).and(v).and(&db) => |s, v, d| { *s += v * d; });
        }
        out.set_component_from_physical(c, &acc);
    }
    out.dealias();
    out.coeffs_mut().slice_mut(s![.., 0, 0, 0]).fill(Complex64::ZERO);
    Ok(out)
}

/// Leray projection acting on the velocity triplet; temperature untouched.
/// Alias kept for readability at call sites mirroring the 4-component system.
fn leray_velocity(u: &SpectralField) -> Result<SpectralField> {
    leray_project(u)
}

/// Diffusion `L U = (nu Lap v, nu' Lap th)` for 4-component fields, or
/// `nu Lap` on all components otherwise.
pub fn diffusion_apply(u: &SpectralField, params: &PhysParams) -> SpectralField {
    let grid = u.grid().clone();
    let mut out = u.clone();
    let nc = out.components();
    for c in 0..nc {
        let nu = if nc == 4 && c == 3 { params.nu_prime } else { params.nu };
        let mut comp = out.coeffs_mut().index_axis_mut(ndarray::Axis(0), c);
        crate::field::par_zip_indexed(&mut comp, |idx, z| {
            let xi = grid.xi(idx);
            *z *= -nu * (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]);
        });
    }
    out
}

/// Full right-hand side of the primitive system:
/// `-P(v . grad U) + L U - (1/eps) P A U` with Leray acting on the velocity
/// triplet.
pub fn pe_rhs(u: &SpectralField, params: &PhysParams) -> Result<SpectralField> {
    let conv = leray_velocity(&convective_term(u, u)?)?;
    let mut out = diffusion_apply(u, params);
    out.axpy(-1.0, &conv);
    let rot = leray_velocity(&apply_a(u, params.froude)?)?;
    out.axpy(-1.0 / params.eps, &rot);
    out.zero_mean();
    Ok(out)
}

const QG_INPUT_TOL: f64 = 1e-10;

/// Right-hand side of the quasi-geostrophic limit system:
/// `-Q(v . grad U) + Gamma U`. Errors if the input has an oscillating part
/// beyond tolerance.
pub fn qg_rhs(u: &SpectralField, params: &PhysParams) -> Result<SpectralField> {
    let osc = osc_project(u, params.froude)?;
    let nu = u.l2_norm();
    if nu > 0.0 && osc.l2_norm() / nu > QG_INPUT_TOL {
        return Err(Error::InvalidInput(format!(
            "qg_rhs input is not quasi-geostrophic: relative oscillating part {:.3e}",
            osc.l2_norm() / nu
        )));
    }
    let conv = qg_project(&convective_term(u, u)?, params.froude)?;
    let mut out = gamma_apply(u, params);
    out.axpy(-1.0, &conv);
    Ok(out)
}

/// Wave forcing created by the quasi-geostrophic flow:
/// `G = G^b + G^l` with `G^b = P P_osc(U . grad U)` and `G^l` the
/// viscosity-imbalance term proportional to `nu - nu'` (zero when they match).
pub fn g_force(u_qg: &SpectralField, params: &PhysParams) -> Result<SpectralField> {
    let conv = convective_term(u_qg, u_qg)?;
    g_force_with_conv(&conv, u_qg, params)
}

/// Same, reusing an already-evaluated convection `U_qg . grad U_qg`.
pub fn g_force_with_conv(
    conv: &SpectralField,
    u_qg: &SpectralField,
    params: &PhysParams,
) -> Result<SpectralField> {
    let mut g = leray_velocity(&osc_project(conv, params.froude)?)?;
    if params.nu != params.nu_prime {
        g.axpy(1.0, &g_force_linear(u_qg, params)?);
    }
    g.zero_mean();
    Ok(g)
}

/// The `nu != nu'` part of the forcing, a Fourier multiplier acting on the
/// potential vorticity:
/// `-F (nu - nu') Lap Delta_F^{-2} (-F d2 d3^2, F d1 d3^2, 0, (d1^2 + d2^2) d3) Omega`.
pub fn g_force_linear(u_qg: &SpectralField, params: &PhysParams) -> Result<SpectralField> {
    let omega = potential_vorticity(u_qg, params.froude)?;
    let grid = omega.grid().clone();
    let froude = params.froude;
    let dnu = params.nu - params.nu_prime;
    let mut out = SpectralField::zeros(grid.clone(), 4)?;
    let om = omega.coeffs().index_axis(ndarray::Axis(0), 0);
    let (mut a, mut b, _c, mut d) = out.coeffs_mut().multi_slice_mut((
        s![0, .., .., ..],
        s![1, .., .., ..],
        s![2, .., .., ..],
        s![3, .., .., ..],
    ));
    par_zip!(Zip::indexed(&mut a).and(&mut b).and(&mut d).and(&om) => |(i, j, k), g1, g2, g4, w| {
        let xi = grid.xi([i, j, k]);
        let kf2 = xi[0] * xi[0] + xi[1] * xi[1] + froude * froude * xi[2] * xi[2];
        if kf2 > 0.0 {
            let k2 = xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
            let pref = froude * dnu * k2 / (kf2 * kf2);
            let i1 = Complex64::new(0.0, 1.0);
            *g1 = pref * froude * xi[1] * xi[2] * xi[2] * i1 * w;
            *g2 = -pref * froude * xi[0] * xi[2] * xi[2] * i1 * w;
            *g4 = -pref * (xi[0] * xi[0] + xi[1] * xi[1]) * xi[2] * i1 * w;
        }
    });
    Ok(out)
}

/// Right-hand side of the linear oscillating flows
/// `Gamma W - (1/eps) P A W`, minus the forcing `G` for the inhomogeneous one.
pub fn w_systems_rhs(
    w: &SpectralField,
    inhomogeneous: bool,
    params: &PhysParams,
    g: Option<&SpectralField>,
) -> Result<SpectralField> {
    let mut out = gamma_apply(w, params);
    let rot = leray_velocity(&apply_a(w, params.froude)?)?;
    out.axpy(-1.0 / params.eps, &rot);
    if inhomogeneous {
        let g = g.ok_or(Error::MissingCompanion("forcing G for the inhomogeneous wave system"))?;
        out.axpy(-1.0, g);
    }
    out.zero_mean();
    Ok(out)
}

/// The ten source terms of the primitive error system. All inputs must share
/// one grid and one timestamp.
pub fn f_terms(
    delta: &SpectralField,
    u_qg: &SpectralField,
    w_h: &SpectralField,
    w_inh: &SpectralField,
    times: [f64; 4],
) -> Result<Vec<SpectralField>> {
    for w in times.windows(2) {
        if w[0] != w[1] {
            return Err(Error::TimestampMismatch(w[0], w[1]));
        }
    }
    for f in [u_qg, w_h, w_inh] {
        same_grid(delta, f)?;
    }
    let qg_plus_inh = u_qg.add(w_inh);
    let conv = |a: &SpectralField, b: &SpectralField| -> Result<SpectralField> {
        Ok(leray_velocity(&convective_term(a, b)?)?.scaled(-1.0))
    };
    Ok(vec![
        conv(delta, delta)?,            // F1
        conv(delta, &qg_plus_inh)?,     // F2
        conv(&qg_plus_inh, delta)?,     // F3
        conv(delta, w_h)?,              // F4
        conv(w_h, delta)?,              // F5
        conv(u_qg, w_inh)?,             // F6
        conv(&qg_plus_inh, w_h)?,       // F7
        conv(w_h, &qg_plus_inh)?,       // F8
        conv(w_inh, &qg_plus_inh)?,     // F9
        conv(w_h, w_h)?,                // F10
    ])
}

/// Closed form of the summed source terms:
/// `sum F_i = P(U_qg . grad U_qg) - P(U . grad U)` with
/// `U = delta + U_qg + W_h + W_inh`. Used both as the production right-hand
/// side of the coupled error solve and as one side of the ledger identity.
pub fn f_sum_closed_form(
    delta: &SpectralField,
    u_qg: &SpectralField,
    w_h: &SpectralField,
    w_inh: &SpectralField,
) -> Result<SpectralField> {
    let conv = convective_term(u_qg, u_qg)?;
    f_sum_with_conv(&conv, delta, u_qg, w_h, w_inh)
}

/// Same, reusing an already-evaluated convection `U_qg . grad U_qg`.
pub fn f_sum_with_conv(
    conv_qg: &SpectralField,
    delta: &SpectralField,
    u_qg: &SpectralField,
    w_h: &SpectralField,
    w_inh: &SpectralField,
) -> Result<SpectralField> {
    let u_total = delta.add(u_qg).add(w_h).add(w_inh);
    let mut out = leray_velocity(conv_qg)?;
    out.axpy(-1.0, &leray_velocity(&convective_term(&u_total, &u_total)?)?);
    Ok(out)
}

/// Right-hand side of the rotating-fluids system:
/// `-P(v . grad v) + nu Lap v - (1/eps) P(e3 x v)`.
pub fn rf_rhs(v: &SpectralField, params: &PhysParams) -> Result<SpectralField> {
    let mut out = diffusion_apply(v, params);
    out.axpy(-1.0, &leray_project(&convective_term(v, v)?)?);
    out.axpy(-1.0 / params.eps, &leray_project(&e3_cross(v)?)?);
    out.zero_mean();
    Ok(out)
}

/// Right-hand side of the perturbed rotating system (2D part absorbed in the
/// pressure): `-P(w . grad w + w . grad ubar + ubar . grad w) + nu Lap w
/// - (1/eps) P(e3 x w)`.
pub fn prf_rhs(
    w: &SpectralField,
    ubar_lifted: &SpectralField,
    params: &PhysParams,
) -> Result<SpectralField> {
    same_grid(w, ubar_lifted)?;
    let mut out = diffusion_apply(w, params);
    out.axpy(-1.0, &leray_project(&prf_transport(w, ubar_lifted)?)?);
    out.axpy(-1.0 / params.eps, &leray_project(&e3_cross(w)?)?);
    out.zero_mean();
    Ok(out)
}

/// Transport trio of the perturbed system (before projection and sign).
fn prf_transport(w: &SpectralField, ubar: &SpectralField) -> Result<SpectralField> {
    let mut t = convective_term(w, w)?;
    t.axpy(1.0, &convective_term(w, ubar)?);
    t.axpy(1.0, &convective_term(ubar, w)?);
    Ok(t)
}

/// Right-hand side of the linear rotating system:
/// `nu Lap W - (1/eps) P(e3 x W)`.
pub fn lrf_rhs(w: &SpectralField, params: &PhysParams) -> Result<SpectralField> {
    let mut out = diffusion_apply(w, params);
    out.axpy(-1.0 / params.eps, &leray_project(&e3_cross(w)?)?);
    out.zero_mean();
    Ok(out)
}

/// `e3 x v = (-v2, v1, 0)`.
pub fn e3_cross(v: &SpectralField) -> Result<SpectralField> {
    if v.components() < 3 {
        return Err(Error::ComponentMismatch { expected: 3, got: v.components() });
    }
    let mut out = v.clone();
    let (mut a, mut b, mut c) = out.coeffs_mut().multi_slice_mut((
        s![0, .., .., ..],
        s![1, .., .., ..],
        s![2, .., .., ..],
    ));
    par_zip!(Zip::from(&mut a).and(&mut b).and(&mut c) => |v1, v2, v3| {
        let (r1, r2) = (-*v2, *v1);
        *v1 = r1;
        *v2 = r2;
        *v3 = Complex64::ZERO;
    });
    if out.components() == 4 {
        out.coeffs_mut().slice_mut(s![3, .., .., ..]).fill(Complex64::ZERO);
    }
    Ok(out)
}

/// The eight source terms of the rotating-fluids error system.
pub fn g_terms_rf(
    delta: &SpectralField,
    w: &SpectralField,
    ubar_lifted: &SpectralField,
    times: [f64; 3],
) -> Result<Vec<SpectralField>> {
    for t in times.windows(2) {
        if t[0] != t[1] {
            return Err(Error::TimestampMismatch(t[0], t[1]));
        }
    }
    same_grid(delta, w)?;
    same_grid(delta, ubar_lifted)?;
    let conv = |a: &SpectralField, b: &SpectralField| -> Result<SpectralField> {
        Ok(leray_project(&convective_term(a, b)?)?.scaled(-1.0))
    };
    Ok(vec![
        conv(delta, delta)?,       // G1
        conv(delta, w)?,           // G2
        conv(w, delta)?,           // G3
        conv(w, w)?,               // G4
        conv(delta, ubar_lifted)?, // G5
        conv(ubar_lifted, delta)?, // G6
        conv(w, ubar_lifted)?,     // G7
        conv(ubar_lifted, w)?,     // G8
    ])
}

/// Closed form of the summed rotating-fluids sources:
/// `-P((d+W) . grad (d+W) + (d+W) . grad ubar + ubar . grad (d+W))`.
pub fn g_sum_closed_form(
    delta: &SpectralField,
    w: &SpectralField,
    ubar_lifted: &SpectralField,
) -> Result<SpectralField> {
    let dw = delta.add(w);
    let mut t = convective_term(&dw, &dw)?;
    t.axpy(1.0, &convective_term(&dw, ubar_lifted)?);
    t.axpy(1.0, &convective_term(ubar_lifted, &dw)?);
    Ok(leray_project(&t)?.scaled(-1.0))
}

// ---------------------------------------------------------------------------
// 2D horizontal torus machinery for the rotating-fluids limit flow
// ---------------------------------------------------------------------------

/// Geometry of the horizontal torus carrying the 2D limit flow.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grid2 {
    n: [usize; 2],
    lengths: [f64; 2],
    dealias_fraction: f64,
    #[serde(skip)]
    wavenumbers: [Vec<f64>; 2],
    #[serde(skip)]
    keep: [Vec<bool>; 2],
}

impl PartialEq for Grid2 {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
            && self.lengths == other.lengths
            && self.dealias_fraction == other.dealias_fraction
    }
}

impl Grid2 {
    pub fn new(n: [usize; 2], lengths: [f64; 2], dealias_fraction: f64) -> Result<Arc<Self>> {
        for (axis, &ni) in n.iter().enumerate() {
            if ni < 8 || ni % 2 != 0 {
                return Err(Error::InvalidGrid(format!(
                    "axis {axis}: n = {ni} must be even and at least 8"
                )));
            }
        }
        if !(dealias_fraction > 0.0 && dealias_fraction <= 1.0) {
            return Err(Error::InvalidGrid("dealias fraction out of (0, 1]".into()));
        }
        let mut g = Grid2 {
            n,
            lengths,
            dealias_fraction,
            wavenumbers: Default::default(),
            keep: Default::default(),
        };
        for axis in 0..2 {
            let ni = n[axis];
            let dk = 2.0 * std::f64::consts::PI / lengths[axis];
            let cutoff = dealias_fraction * ni as f64 / 2.0;
            let mut ks = Vec::with_capacity(ni);
            let mut keep = Vec::with_capacity(ni);
            for m in 0..ni {
                let ms = crate::grid::signed_alias(m, ni);
                ks.push(dk * ms as f64);
                keep.push((ms.unsigned_abs() as f64) <= cutoff && ms != -((ni / 2) as i64));
            }
            g.wavenumbers[axis] = ks;
            g.keep[axis] = keep;
        }
        Ok(Arc::new(g))
    }

    pub fn n(&self) -> [usize; 2] {
        self.n
    }

    pub fn lengths(&self) -> [f64; 2] {
        self.lengths
    }

    pub fn dealias_fraction(&self) -> f64 {
        self.dealias_fraction
    }

    pub fn area(&self) -> f64 {
        self.lengths[0] * self.lengths[1]
    }

    pub fn num_points(&self) -> usize {
        self.n[0] * self.n[1]
    }

    #[inline]
    pub fn xi(&self, idx: [usize; 2]) -> [f64; 2] {
        [self.wavenumbers[0][idx[0]], self.wavenumbers[1][idx[1]]]
    }

    #[inline]
    pub fn is_kept(&self, idx: [usize; 2]) -> bool {
        self.keep[0][idx[0]] && self.keep[1][idx[1]]
    }

    pub fn dx(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.n[axis] as f64
    }

    pub fn x(&self, axis: usize, i: usize) -> f64 {
        self.dx(axis) * i as f64
    }
}

/// Three-component spectral field on the horizontal torus, representing the
/// 2D limit flow `ubar = (ubar_h, ubar^3)` with `div_h ubar_h = 0`.
#[derive(Debug, Clone)]
pub struct Field2D {
    grid: Arc<Grid2>,
    coeffs: Array3<Complex64>, // (3, n1, n2)
}

impl Field2D {
    pub fn zeros(grid: Arc<Grid2>) -> Self {
        let [n1, n2] = grid.n();
        Field2D { grid, coeffs: Array3::zeros((3, n1, n2)) }
    }

    pub fn transform_forward(grid: Arc<Grid2>, samples: &Array3<f64>) -> Result<Self> {
        let [n1, n2] = grid.n();
        if samples.shape() != [3, n1, n2] {
            return Err(Error::ShapeMismatch {
                expected: vec![3, n1, n2],
                got: samples.shape().to_vec(),
            });
        }
        let scale = 1.0 / grid.num_points() as f64;
        let mut coeffs = Array3::zeros((3, n1, n2));
        for c in 0..3 {
            let mut comp: Array2<Complex64> =
                samples.index_axis(ndarray::Axis(0), c).mapv(|x| Complex64::new(x * scale, 0.0));
            crate::fft::fft2(&mut comp, crate::fft::Direction::Forward);
            coeffs.index_axis_mut(ndarray::Axis(0), c).assign(&comp);
        }
        Ok(Field2D { grid, coeffs })
    }

    pub fn component_physical(&self, c: usize) -> Array2<f64> {
        let mut comp: Array2<Complex64> = self.coeffs.index_axis(ndarray::Axis(0), c).to_owned();
        crate::fft::fft2(&mut comp, crate::fft::Direction::Inverse);
        comp.mapv(|z| z.re)
    }

    pub fn set_component_from_physical(&mut self, c: usize, samples: &Array2<f64>) {
        let scale = 1.0 / self.grid.num_points() as f64;
        let mut comp: Array2<Complex64> = samples.mapv(|x| Complex64::new(x * scale, 0.0));
        crate::fft::fft2(&mut comp, crate::fft::Direction::Forward);
        self.coeffs.index_axis_mut(ndarray::Axis(0), c).assign(&comp);
    }

    pub fn grid(&self) -> &Arc<Grid2> {
        &self.grid
    }

    pub fn coeffs(&self) -> &Array3<Complex64> {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut Array3<Complex64> {
        &mut self.coeffs
    }

    pub fn derivative(&self, axis: usize) -> Field2D {
        let mut out = self.clone();
        let ks = self.grid.wavenumbers[axis].clone();
        for c in 0..3 {
            let mut comp = out.coeffs.index_axis_mut(ndarray::Axis(0), c);
            Zip::indexed(&mut comp).for_each(|(i, j), z| {
                *z *= Complex64::new(0.0, ks[[i, j][axis]]);
            });
        }
        out
    }

    /// Horizontal Leray projection of the first two components.
    pub fn leray_h(&self) -> Field2D {
        let mut out = self.clone();
        let grid = self.grid.clone();
        let (mut a, mut b) = out
            .coeffs
            .multi_slice_mut((s![0, .., ..], s![1, .., ..]));
        Zip::indexed(&mut a).and(&mut b).for_each(|(i, j), v1, v2| {
            let xi = grid.xi([i, j]);
            let k2 = xi[0] * xi[0] + xi[1] * xi[1];
            if k2 > 0.0 {
                let dot = (xi[0] * *v1 + xi[1] * *v2) / k2;
                *v1 -= xi[0] * dot;
                *v2 -= xi[1] * dot;
            }
        });
        out
    }

    pub fn dealias(&mut self) {
        let grid = self.grid.clone();
        for c in 0..3 {
            let mut comp = self.coeffs.index_axis_mut(ndarray::Axis(0), c);
            Zip::indexed(&mut comp).for_each(|(i, j), z| {
                if !grid.is_kept([i, j]) {
                    *z = Complex64::ZERO;
                }
            });
        }
    }

    pub fn l2_norm(&self) -> f64 {
        let s: f64 = self.coeffs.iter().map(|z| z.norm_sqr()).sum();
        (self.grid.area() * s).sqrt()
    }

    /// `||grad ubar||_{L2}` over both horizontal directions and all three
    /// components.
    pub fn h1_seminorm(&self) -> f64 {
        let mut acc = 0.0;
        for c in 0..3 {
            let comp = self.coeffs.index_axis(ndarray::Axis(0), c);
            for ((i, j), z) in comp.indexed_iter() {
                let xi = self.grid.xi([i, j]);
                acc += (xi[0] * xi[0] + xi[1] * xi[1]) * z.norm_sqr();
            }
        }
        (self.grid.area() * acc).sqrt()
    }

    pub fn horizontal_divergence(&self) -> f64 {
        let mut acc = 0.0;
        let (v1, v2) = (self.coeffs.slice(s![0, .., ..]), self.coeffs.slice(s![1, .., ..]));
        for ((i, j), z) in v1.indexed_iter() {
            let xi = self.grid.xi([i, j]);
            let d = Complex64::new(0.0, 1.0) * (xi[0] * z + xi[1] * v2[[i, j]]);
            acc += d.norm_sqr();
        }
        (self.grid.area() * acc).sqrt()
    }

    pub fn scale(&mut self, a: f64) {
        self.coeffs.mapv_inplace(|z| z * a);
    }

    pub fn axpy(&mut self, a: f64, other: &Field2D) {
        Zip::from(&mut self.coeffs).and(&other.coeffs).for_each(|x, y| *x += a * y);
    }

    pub fn sub(&self, other: &Field2D) -> Field2D {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn max_abs_physical(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let phys: Vec<Array2<f64>> = (0..3).map(|c| self.component_physical(c)).collect();
        let [n1, n2] = self.grid.n();
        for i in 0..n1 {
            for j in 0..n2 {
                let s: f64 = phys.iter().map(|p| p[[i, j]] * p[[i, j]]).sum();
                worst = worst.max(s);
            }
        }
        worst.sqrt()
    }

    pub fn has_non_finite(&self) -> bool {
        self.coeffs.iter().any(|z| !z.re.is_finite() || !z.im.is_finite())
    }

    pub fn mean(&self, c: usize) -> Complex64 {
        self.coeffs[[c, 0, 0]]
    }
}

/// Horizontal convective term `a_h . grad_h b` for 2D fields (all three
/// components of `b` advected by the first two of `a`).
pub fn convective_term_2d(a: &Field2D, b: &Field2D) -> Result<Field2D> {
    if **a.grid() != **b.grid() {
        return Err(Error::GridMismatch);
    }
    let vel = [a.component_physical(0), a.component_physical(1)];
    let mut out = Field2D::zeros(b.grid().clone());
    let mut acc = Array2::<f64>::zeros(vel[0].raw_dim());
    for c in 0..3 {
        acc.fill(0.0);
        for (axis, v) in vel.iter().enumerate() {
            let db = b.derivative(axis).component_physical(c);
            Zip::from(&mut acc).and(v).and(&db).for_each(|s, v, d| *s += v * d);
        }
        out.set_component_from_physical(c, &acc);
    }
    out.dealias();
    out.coeffs_mut().slice_mut(s![.., 0, 0]).fill(Complex64::ZERO);
    Ok(out)
}

/// Full right-hand side of the 2D limit flow (three components):
/// horizontal Leray projection on the horizontal pair, plain transport for
/// the third component, plus horizontal diffusion.
pub fn ns2d_rhs(ubar: &Field2D, nu: f64) -> Result<Field2D> {
    let conv = convective_term_2d(ubar, ubar)?;
    // project the horizontal pair; the third component is a transported scalar
    let mut projected = conv.leray_h();
    projected
        .coeffs_mut()
        .slice_mut(s![2, .., ..])
        .assign(&conv.coeffs().slice(s![2, .., ..]));
    let mut out = ubar.clone();
    let grid = ubar.grid().clone();
    for c in 0..3 {
        let mut comp = out.coeffs_mut().index_axis_mut(ndarray::Axis(0), c);
        Zip::indexed(&mut comp).for_each(|(i, j), z| {
            let xi = grid.xi([i, j]);
            *z *= -nu * (xi[0] * xi[0] + xi[1] * xi[1]);
        });
    }
    out.axpy(-1.0, &projected);
    Ok(out)
}

/// Embed a 2D field into the `xi_3 = 0` plane of a 3D spectral array.
pub fn lift_2d(ubar: &Field2D, grid3: &Arc<GridSpec>) -> Result<SpectralField> {
    let g2 = ubar.grid();
    let n3 = grid3.n();
    let n2 = g2.n();
    if n3[0] != n2[0]
        || n3[1] != n2[1]
        || (grid3.lengths()[0] - g2.lengths()[0]).abs() > 1e-12
        || (grid3.lengths()[1] - g2.lengths()[1]).abs() > 1e-12
        || (grid3.dealias_fraction() - g2.dealias_fraction()).abs() > 1e-12
    {
        return Err(Error::GridMismatch);
    }
    let mut out = SpectralField::zeros(grid3.clone(), 3)?;
    for c in 0..3 {
        let src = ubar.coeffs().index_axis(ndarray::Axis(0), c);
        let mut dst = out.coeffs_mut().index_axis_mut(ndarray::Axis(0), c);
        let mut plane = dst.index_axis_mut(ndarray::Axis(2), 0);
        plane.assign(&src);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::random_real_field;
    use crate::ops::{divergence, inner_l2};
    use approx::assert_relative_eq;
    use ndarray::Array4;
    use std::f64::consts::PI;

    fn grid() -> Arc<GridSpec> {
        GridSpec::new([16, 16, 16], [2.0 * PI; 3], 2.0 / 3.0).unwrap()
    }

    fn params() -> PhysParams {
        PhysParams::new(0.7, 0.7, 2.0, 0.05).unwrap()
    }

    fn div_free(g: &Arc<GridSpec>, comps: usize, seed: u64) -> SpectralField {
        let mut u = leray_project(&random_real_field(g, comps, seed)).unwrap();
        u.dealias();
        u
    }

    fn rel(a: &SpectralField, b: &SpectralField) -> f64 {
        a.sub(b).l2_norm() / b.l2_norm().max(1e-300)
    }

    #[test]
    fn convection_of_constant_vanishes_and_transport_works() {
        let g = grid();
        let b = SpectralField::transform_forward(g.clone(), &Array4::from_elem((1, 16, 16, 16), 3.0))
            .unwrap();
        let a = div_free(&g, 3, 1);
        assert!(convective_term(&a, &b).unwrap().l2_norm() < 1e-12);

        // a = (1, 0, 0) constant, b = sin(x1) -> cos(x1)
        let mut av = Array4::zeros((3, 16, 16, 16));
        av.index_axis_mut(ndarray::Axis(0), 0).fill(1.0);
        let a = SpectralField::transform_forward(g.clone(), &av).unwrap();
        let mut bv = Array4::zeros((1, 16, 16, 16));
        for ((_, i, _, _), v) in bv.indexed_iter_mut() {
            *v = (g.x(0, i)).sin();
        }
        let b = SpectralField::transform_forward(g.clone(), &bv).unwrap();
        let conv = convective_term(&a, &b).unwrap();
        let mut expect = bv.clone();
        for ((_, i, _, _), v) in expect.indexed_iter_mut() {
            *v = (g.x(0, i)).cos();
        }
        let expect = SpectralField::transform_forward(g, &expect).unwrap();
        assert!(rel(&conv, &expect) < 1e-12);
    }

    #[test]
    fn transport_is_skew_for_divergence_free_advection() {
        let g = grid();
        let a = div_free(&g, 3, 2);
        let b = random_real_field(&g, 1, 3).dealiased();
        let conv = convective_term(&a, &b).unwrap();
        let e = inner_l2(&conv, &b).abs() / (b.l2_norm() * b.l2_norm());
        assert!(e < 1e-10, "skew defect {e}");
    }

    #[test]
    fn pe_rhs_basics() {
        let g = grid();
        let p = params();
        let zero = SpectralField::zeros(g.clone(), 4).unwrap();
        assert!(pe_rhs(&zero, &p).unwrap().l2_norm() == 0.0);

        // QG input with nu = nu': the 1/eps term vanishes
        let u = qg_project(&random_real_field(&g, 4, 5), p.froude).unwrap().dealiased();
        let fast = leray_project(&apply_a(&u, p.froude).unwrap()).unwrap();
        assert!(fast.l2_norm() / u.l2_norm() < 1e-12);

        // every RHS preserves divergence-freeness and kills the mean
        let u = div_free(&g, 4, 6);
        let r = pe_rhs(&u, &p).unwrap();
        assert!(divergence(&r).unwrap().l2_norm() / r.l2_norm().max(1e-30) < 1e-10);
        for c in 0..4 {
            assert!(r.mean(c).norm() < 1e-13);
        }
    }

    #[test]
    fn qg_rhs_structure() {
        let g = grid();
        let p = params();
        let u = qg_project(&random_real_field(&g, 4, 7), p.froude).unwrap().dealiased();
        let r = qg_rhs(&u, &p).unwrap();
        // output is QG
        let osc = osc_project(&r, p.froude).unwrap();
        assert!(osc.l2_norm() / r.l2_norm() < 1e-10);
        // non-QG input rejected
        let bad = random_real_field(&g, 4, 8);
        assert!(qg_rhs(&bad, &p).is_err());
        // nu = nu': Gamma term equals nu Lap
        let gam = gamma_apply(&u, &p);
        let mut lap = u.clone();
        lap.apply_multiplier(|xi| {
            Complex64::new(-p.nu * (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]), 0.0)
        });
        assert!(rel(&gam, &lap) < 1e-12);
    }

    #[test]
    fn qg_rhs_matches_vorticity_form() {
        let g = grid();
        let p = params();
        let u = qg_project(&random_real_field(&g, 4, 9), p.froude).unwrap().dealiased();
        let r = qg_rhs(&u, &p).unwrap();
        let omega_rhs = potential_vorticity(&r, p.froude).unwrap();
        // independent evaluation: -v . grad Omega + Gamma Omega
        let omega = potential_vorticity(&u, p.froude).unwrap();
        let mut expect = gamma_apply(&omega, &p);
        expect.axpy(-1.0, &convective_term(&u, &omega).unwrap());
        let diff = omega_rhs.sub(&expect).l2_norm() / expect.l2_norm();
        assert!(diff < 1e-8, "vorticity-form defect {diff}");
    }

    #[test]
    fn g_force_properties() {
        let g = grid();
        let p = params();
        let u = qg_project(&random_real_field(&g, 4, 10), p.froude).unwrap().dealiased();
        let gf = g_force(&u, &p).unwrap();
        // with nu = nu' it is the projected oscillating convection only
        let expect =
            leray_project(&osc_project(&convective_term(&u, &u).unwrap(), p.froude).unwrap()).unwrap();
        assert!(rel(&gf, &expect) < 1e-12);
        // divergence-free and vorticity-free
        assert!(divergence(&gf).unwrap().l2_norm() / gf.l2_norm() < 1e-10);
        let om = potential_vorticity(&gf, p.froude).unwrap();
        assert!(om.l2_norm() / gf.l2_norm() < 1e-10);
        // zero input
        let z = SpectralField::zeros(g.clone(), 4).unwrap();
        assert!(g_force(&z, &p).unwrap().l2_norm() == 0.0);
        // nu != nu': the linear part is also divergence- and vorticity-free
        let p2 = PhysParams::new(0.7, 0.3, 2.0, 0.05).unwrap();
        let gl = g_force_linear(&u, &p2).unwrap();
        assert!(divergence(&gl).unwrap().l2_norm() / gl.l2_norm() < 1e-10);
        assert!(potential_vorticity(&gl, p2.froude).unwrap().l2_norm() / gl.l2_norm() < 1e-10);
    }

    #[test]
    fn w_systems_rhs_contract() {
        let g = grid();
        let p = params();
        let w = div_free(&g, 4, 11);
        let zero = SpectralField::zeros(g.clone(), 4).unwrap();
        assert!(w_systems_rhs(&zero, false, &p, None).unwrap().l2_norm() == 0.0);
        // W_INH with G = 0 reduces to the homogeneous RHS
        let h = w_systems_rhs(&w, false, &p, None).unwrap();
        let inh = w_systems_rhs(&w, true, &p, Some(&zero)).unwrap();
        assert!(rel(&h, &inh) < 1e-13);
        assert!(w_systems_rhs(&w, true, &p, None).is_err());
        // linearity
        let w2 = div_free(&g, 4, 12);
        let lhs = w_systems_rhs(&w.scaled(2.0).add(&w2.scaled(-0.5)), false, &p, None).unwrap();
        let rhs = w_systems_rhs(&w, false, &p, None).unwrap().scaled(2.0).add(
            &w_systems_rhs(&w2, false, &p, None).unwrap().scaled(-0.5),
        );
        assert!(rel(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn f_terms_sum_identity() {
        let g = grid();
        let froude = 2.0;
        let delta = div_free(&g, 4, 20);
        let _ = froude;
        let u_qg = qg_project(&random_real_field(&g, 4, 21), froude).unwrap().dealiased();
        let w_h = div_free(&g, 4, 22);
        let w_inh = div_free(&g, 4, 23);
        let terms = f_terms(&delta, &u_qg, &w_h, &w_inh, [0.5; 4]).unwrap();
        assert_eq!(terms.len(), 10);
        let mut total = SpectralField::zeros(g.clone(), 4).unwrap();
        for t in &terms {
            total.axpy(1.0, t);
        }
        let closed = f_sum_closed_form(&delta, &u_qg, &w_h, &w_inh).unwrap();
        assert!(rel(&total, &closed) < 1e-10, "sum identity defect {}", rel(&total, &closed));
        // zero inputs -> zero terms
        let z = SpectralField::zeros(g.clone(), 4).unwrap();
        for t in f_terms(&z, &z, &z, &z, [0.0; 4]).unwrap() {
            assert!(t.l2_norm() == 0.0);
        }
        // timestamp mismatch rejected
        assert!(f_terms(&delta, &u_qg, &w_h, &w_inh, [0.0, 0.0, 0.1, 0.0]).is_err());
    }

    #[test]
    fn g_terms_sum_identity() {
        let g = grid();
        let delta = div_free(&g, 3, 31);
        let w = div_free(&g, 3, 32);
        let ubar = lifted_2d_field(&g, 33);
        let terms = g_terms_rf(&delta, &w, &ubar, [1.0; 3]).unwrap();
        assert_eq!(terms.len(), 8);
        let mut total = SpectralField::zeros(g.clone(), 3).unwrap();
        for t in &terms {
            total.axpy(1.0, t);
        }
        let closed = g_sum_closed_form(&delta, &w, &ubar).unwrap();
        assert!(rel(&total, &closed) < 1e-10);
        // W = 0 reduces to the three delta/ubar terms
        let z = SpectralField::zeros(g.clone(), 3).unwrap();
        let reduced = g_terms_rf(&delta, &z, &ubar, [1.0; 3]).unwrap();
        let mut total_r = SpectralField::zeros(g.clone(), 3).unwrap();
        for t in &reduced {
            total_r.axpy(1.0, t);
        }
        let closed_r = g_sum_closed_form(&delta, &z, &ubar).unwrap();
        assert!(rel(&total_r, &closed_r) < 1e-10);
    }

    fn grid2() -> Arc<Grid2> {
        Grid2::new([16, 16], [2.0 * PI; 2], 2.0 / 3.0).unwrap()
    }

    fn random_2d(g: &Arc<Grid2>, seed: u64) -> Field2D {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let [n1, n2] = g.n();
        let mut s = Array3::zeros((3, n1, n2));
        for v in s.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut f = Field2D::transform_forward(g.clone(), &s).unwrap().leray_h();
        f.dealias();
        f
    }

    fn lifted_2d_field(g3: &Arc<GridSpec>, seed: u64) -> SpectralField {
        let g2 = Grid2::new(
            [g3.n()[0], g3.n()[1]],
            [g3.lengths()[0], g3.lengths()[1]],
            g3.dealias_fraction(),
        )
        .unwrap();
        lift_2d(&random_2d(&g2, seed), g3).unwrap()
    }

    #[test]
    fn ns2d_energy_balance_pointwise() {
        let g = grid2();
        let u = random_2d(&g, 40);
        let nu = 0.3;
        let r = ns2d_rhs(&u, nu).unwrap();
        // <rhs, u> = -nu ||grad u||^2
        let mut dot = 0.0;
        for (x, y) in r.coeffs().iter().zip(u.coeffs().iter()) {
            dot += (x.conj() * y).re;
        }
        dot *= g.area();
        let expect = -nu * u.h1_seminorm().powi(2);
        assert_relative_eq!(dot, expect, max_relative = 1e-10);
        // zero input
        assert!(ns2d_rhs(&Field2D::zeros(g.clone()), nu).unwrap().l2_norm() == 0.0);
        // third-component mean conserved
        assert!(r.mean(2).norm() < 1e-13);
    }

    #[test]
    fn lift_preserves_structure() {
        let g3 = grid();
        let g2 = grid2();
        let u = random_2d(&g2, 41);
        let lifted = lift_2d(&u, &g3).unwrap();
        // x3-independent: vertical derivative vanishes
        assert!(lifted.derivative(2).l2_norm() < 1e-13);
        // norm scaling by sqrt(L3)
        assert_relative_eq!(
            lifted.l2_norm(),
            u.l2_norm() * g3.lengths()[2].sqrt(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn rf_prf_ns2d_consistency() {
        let g3 = grid();
        let g2 = grid2();
        let p = params();
        let ubar = random_2d(&g2, 50);
        let ubar_lift = lift_2d(&ubar, &g3).unwrap();
        let w = div_free(&g3, 3, 51);
        let v = ubar_lift.add(&w);

        let full = rf_rhs(&v, &p).unwrap();
        let part_w = prf_rhs(&w, &ubar_lift, &p).unwrap();
        let part_u = lift_2d(&ns2d_rhs(&ubar, p.nu).unwrap(), &g3).unwrap();
        let resid = full.sub(&part_w).sub(&part_u);
        let e = resid.l2_norm() / full.l2_norm();
        assert!(e < 1e-10, "consistency defect {e}");

        // PRF with ubar = 0 equals RF on w
        let z2 = SpectralField::zeros(g3.clone(), 3).unwrap();
        let a = prf_rhs(&w, &z2, &p).unwrap();
        let b = rf_rhs(&w, &p).unwrap();
        assert!(rel(&a, &b) < 1e-12);

        // LRF is linear
        let w2 = div_free(&g3, 3, 52);
        let lhs = lrf_rhs(&w.scaled(1.5).add(&w2.scaled(-2.0)), &p).unwrap();
        let rhs = lrf_rhs(&w, &p).unwrap().scaled(1.5).add(&lrf_rhs(&w2, &p).unwrap().scaled(-2.0));
        assert!(rel(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn penalized_terms_invisible_to_energy() {
        let g = grid();
        let p = params();
        let u = div_free(&g, 4, 60);
        let pau = leray_project(&apply_a(&u, p.froude).unwrap()).unwrap();
        assert!(inner_l2(&pau, &u).abs() / (u.l2_norm() * u.l2_norm()) < 1e-12);
        let v = div_free(&g, 3, 61);
        let pev = leray_project(&e3_cross(&v).unwrap()).unwrap();
        assert!(inner_l2(&pev, &v).abs() / (v.l2_norm() * v.l2_norm()) < 1e-12);
    }

    #[test]
    fn rhs_means_vanish() {
        let g = grid();
        let p = params();
        let u = div_free(&g, 4, 70);
        for r in [pe_rhs(&u, &p).unwrap(), w_systems_rhs(&u, false, &p, None).unwrap()] {
            for c in 0..4 {
                assert!(r.mean(c).norm() < 1e-13);
            }
        }
    }
}
