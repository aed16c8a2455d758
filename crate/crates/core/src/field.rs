//! Multi-component spectral fields and the real<->spectral transform contract.
//!
//! Coefficients follow the Fourier-series normalization: a constant field
//! maps to a coefficient at `xi = 0` equal to the constant. Fields holding
//! real data keep Hermitian symmetry `c(xi) = conj(c(-xi))`; the dealias
//! mask (which always includes the Nyquist rows) is applied after every
//! nonlinear evaluation.

use crate::fft::{fft3, Direction, LaneMode};
use crate::grid::GridSpec;
use crate::{Error, Result};
use ndarray::{Array3, Array4, Axis, Zip};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Complex Fourier coefficients of a `c`-component field, `c` in {1, 3, 4}.
#[derive(Debug, Clone)]
pub struct SpectralField {
    grid: Arc<GridSpec>,
    coeffs: Array4<Complex64>,
}

impl SpectralField {
    /// Zero field with `components` in {1, 3, 4}.
    pub fn zeros(grid: Arc<GridSpec>, components: usize) -> Result<Self> {
        check_components(components)?;
        let [n1, n2, n3] = grid.n();
        Ok(SpectralField { grid, coeffs: Array4::zeros((components, n1, n2, n3)) })
    }

    /// Wrap existing coefficients.
    pub fn from_coeffs(grid: Arc<GridSpec>, coeffs: Array4<Complex64>) -> Result<Self> {
        check_components(coeffs.shape()[0])?;
        let [n1, n2, n3] = grid.n();
        if coeffs.shape()[1..] != [n1, n2, n3] {
            return Err(Error::ShapeMismatch {
                expected: vec![coeffs.shape()[0], n1, n2, n3],
                got: coeffs.shape().to_vec(),
            });
        }
        Ok(SpectralField { grid, coeffs })
    }

    /// Forward transform of real collocation samples, shape `(c, n1, n2, n3)`.
    pub fn transform_forward(grid: Arc<GridSpec>, samples: &Array4<f64>) -> Result<Self> {
        check_components(samples.shape()[0])?;
        let [n1, n2, n3] = grid.n();
        if samples.shape()[1..] != [n1, n2, n3] {
            return Err(Error::ShapeMismatch {
                expected: vec![samples.shape()[0], n1, n2, n3],
                got: samples.shape().to_vec(),
            });
        }
        let c = samples.shape()[0];
        let scale = 1.0 / grid.num_points() as f64;
        let mut coeffs = Array4::zeros((c, n1, n2, n3));
        for ci in 0..c {
            let mut comp: Array3<Complex64> =
                samples.index_axis(Axis(0), ci).mapv(|x| Complex64::new(x, 0.0));
            fft3(&mut comp, Direction::Forward, LaneMode::auto());
            comp.mapv_inplace(|z| z * scale);
            coeffs.index_axis_mut(Axis(0), ci).assign(&comp);
        }
        Ok(SpectralField { grid, coeffs })
    }

    /// Inverse transform to real collocation samples (real part of the sum).
    pub fn transform_inverse(&self) -> Array4<f64> {
        let c = self.components();
        let [n1, n2, n3] = self.grid.n();
        let mut out = Array4::zeros((c, n1, n2, n3));
        for ci in 0..c {
            let mut comp: Array3<Complex64> = self.coeffs.index_axis(Axis(0), ci).to_owned();
            fft3(&mut comp, Direction::Inverse, LaneMode::auto());
            Zip::from(out.index_axis_mut(Axis(0), ci)).and(&comp).for_each(|o, z| *o = z.re);
        }
        out
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.coeffs.shape()[0]
    }

    pub fn coeffs(&self) -> &Array4<Complex64> {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut Array4<Complex64> {
        &mut self.coeffs
    }

    /// One component as a scalar field (cloned coefficients).
    pub fn component(&self, c: usize) -> SpectralField {
        SpectralField {
            grid: self.grid.clone(),
            coeffs: self
                .coeffs
                .index_axis(Axis(0), c)
                .to_owned()
                .insert_axis(Axis(0)),
        }
    }

    /// Assemble a field from scalar components on one grid.
    pub fn from_components(parts: &[&SpectralField]) -> Result<SpectralField> {
        let grid = parts[0].grid.clone();
        check_components(parts.len())?;
        let [n1, n2, n3] = grid.n();
        let mut coeffs = Array4::zeros((parts.len(), n1, n2, n3));
        for (ci, p) in parts.iter().enumerate() {
            if p.components() != 1 {
                return Err(Error::ComponentMismatch { expected: 1, got: p.components() });
            }
            if !Arc::ptr_eq(&p.grid, &grid) && **p.grid() != *grid {
                return Err(Error::GridMismatch);
            }
            coeffs.index_axis_mut(Axis(0), ci).assign(&p.coeffs.index_axis(Axis(0), 0));
        }
        Ok(SpectralField { grid, coeffs })
    }

    /// Differentiate along `axis`: multiply coefficients by `i xi_axis`.
    pub fn derivative(&self, axis: usize) -> SpectralField {
        let mut out = self.clone();
        out.derivative_inplace(axis);
        out
    }

    pub fn derivative_inplace(&mut self, axis: usize) {
        let ks = self.grid.wavenumbers(axis).to_vec();
        for ci in 0..self.components() {
            let mut comp = self.coeffs.index_axis_mut(Axis(0), ci);
            Zip::indexed(&mut comp).for_each(|(i, j, k), z| {
                let kk = ks[[i, j, k][axis]];
                *z *= Complex64::new(0.0, kk);
            });
        }
    }

    /// Scalar spectral multiplier `m(xi)` applied to every component.
    pub fn apply_multiplier<F>(&mut self, m: F)
    where
        F: Fn([f64; 3]) -> Complex64 + Sync,
    {
        let grid = self.grid.clone();
        for ci in 0..self.components() {
            let mut comp = self.coeffs.index_axis_mut(Axis(0), ci);
            par_zip_indexed(&mut comp, |idx, z| {
                *z *= m(grid.xi(idx));
            });
        }
    }

    /// Zero masked modes (dealias mask plus Nyquist rows). Idempotent.
    pub fn dealias(&mut self) {
        let grid = self.grid.clone();
        for ci in 0..self.components() {
            let mut comp = self.coeffs.index_axis_mut(Axis(0), ci);
            par_zip_indexed(&mut comp, |idx, z| {
                if !grid.is_kept(idx) {
                    *z = Complex64::ZERO;
                }
            });
        }
    }

    pub fn dealiased(&self) -> SpectralField {
        let mut out = self.clone();
        out.dealias();
        out
    }

    /// L2 norm via Parseval: `sqrt(vol * sum |c|^2)`.
    pub fn l2_norm(&self) -> f64 {
        let mut s = 0.0;
        for z in self.coeffs.iter() {
            s += z.norm_sqr();
        }
        (self.grid.volume() * s).sqrt()
    }

    /// Mean value (coefficient at xi = 0) of component `c`.
    pub fn mean(&self, c: usize) -> Complex64 {
        self.coeffs[[c, 0, 0, 0]]
    }

    pub fn scale(&mut self, a: f64) {
        self.coeffs.mapv_inplace(|z| z * a);
    }

    pub fn scaled(&self, a: f64) -> SpectralField {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &SpectralField) {
        Zip::from(&mut self.coeffs).and(&other.coeffs).for_each(|x, y| *x += a * y);
    }

    pub fn add(&self, other: &SpectralField) -> SpectralField {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &SpectralField) -> SpectralField {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// Largest pointwise deviation from Hermitian symmetry, for diagnostics.
    pub fn hermitian_defect(&self) -> f64 {
        let [n1, n2, n3] = self.grid.n();
        let mut worst: f64 = 0.0;
        for c in 0..self.components() {
            for i in 0..n1 {
                for j in 0..n2 {
                    for k in 0..n3 {
                        let m = [(n1 - i) % n1, (n2 - j) % n2, (n3 - k) % n3];
                        let a = self.coeffs[[c, i, j, k]];
                        let b = self.coeffs[[c, m[0], m[1], m[2]]].conj();
                        worst = worst.max((a - b).norm());
                    }
                }
            }
        }
        worst
    }

    pub fn has_non_finite(&self) -> bool {
        self.coeffs.iter().any(|z| !z.re.is_finite() || !z.im.is_finite())
    }

    /// Zero the `xi = 0` coefficient of every component. The solvers keep the
    /// mean frozen, so every right-hand side ends with this.
    pub fn zero_mean(&mut self) {
        self.coeffs.slice_mut(ndarray::s![.., 0, 0, 0]).fill(Complex64::ZERO);
    }

    /// One component inverse-transformed to physical samples.
    pub fn component_physical(&self, c: usize) -> Array3<f64> {
        let mut comp: Array3<Complex64> = self.coeffs.index_axis(Axis(0), c).to_owned();
        fft3(&mut comp, Direction::Inverse, LaneMode::auto());
        comp.mapv(|z| z.re)
    }

    /// Overwrite one component with the forward transform of physical samples.
    pub fn set_component_from_physical(&mut self, c: usize, samples: &Array3<f64>) {
        let scale = 1.0 / self.grid.num_points() as f64;
        let mut comp: Array3<Complex64> = samples.mapv(|x| Complex64::new(x * scale, 0.0));
        fft3(&mut comp, Direction::Forward, LaneMode::auto());
        self.coeffs.index_axis_mut(Axis(0), c).assign(&comp);
    }

    /// Maximum pointwise Euclidean magnitude over the collocation grid.
    pub fn max_abs_physical(&self) -> f64 {
        let phys = self.transform_inverse();
        let c = self.components();
        let [n1, n2, n3] = self.grid.n();
        let mut worst: f64 = 0.0;
        for i in 0..n1 {
            for j in 0..n2 {
                for k in 0..n3 {
                    let mut s = 0.0;
                    for ci in 0..c {
                        let v = phys[[ci, i, j, k]];
                        s += v * v;
                    }
                    worst = worst.max(s);
                }
            }
        }
        worst.sqrt()
    }
}

fn check_components(c: usize) -> Result<()> {
    if matches!(c, 1 | 3 | 4) {
        Ok(())
    } else {
        Err(Error::ComponentMismatch { expected: 4, got: c })
    }
}

/// Indexed elementwise map over a 3D view, parallel over the outer axis when
/// available. Each element is written independently, so output does not
/// depend on the scheduling.
pub(crate) fn par_zip_indexed<F>(comp: &mut ndarray::ArrayViewMut3<'_, Complex64>, f: F)
where
    F: Fn([usize; 3], &mut Complex64) + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use ndarray::parallel::prelude::*;
        comp.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(i, mut plane)| {
            Zip::indexed(&mut plane).for_each(|(j, k), z| f([i, j, k], z));
        });
    }
    #[cfg(not(feature = "parallel"))]
    {
        Zip::indexed(comp).for_each(|(i, j, k), z| f([i, j, k], z));
    }
}

/// Deterministic pseudo-random real field (unit-variance white noise per
/// collocation point), transformed to spectral space.
pub fn random_real_field(grid: &Arc<GridSpec>, components: usize, seed: u64) -> SpectralField {
    let [n1, n2, n3] = grid.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Array4::zeros((components, n1, n2, n3));
    for v in samples.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    SpectralField::transform_forward(grid.clone(), &samples).expect("valid shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn grid8() -> Arc<GridSpec> {
        GridSpec::new([8, 8, 8], [2.0 * PI; 3], 2.0 / 3.0).unwrap()
    }

    #[test]
    fn constant_field_maps_to_zero_mode() {
        let g = grid8();
        let samples = Array4::from_elem((1, 8, 8, 8), 2.5);
        let f = SpectralField::transform_forward(g, &samples).unwrap();
        assert_relative_eq!(f.mean(0).re, 2.5, max_relative = 1e-13);
        let off: f64 = f
            .coeffs()
            .indexed_iter()
            .filter(|((_, i, j, k), _)| (*i, *j, *k) != (0, 0, 0))
            .map(|(_, z)| z.norm())
            .fold(0.0, f64::max);
        assert!(off < 1e-13);
    }

    #[test]
    fn cosine_splits_into_half_coefficients() {
        let g = grid8();
        let mut samples = Array4::zeros((1, 8, 8, 8));
        for ((_, i, _, _), v) in samples.indexed_iter_mut() {
            *v = (g.x(0, i)).cos();
        }
        let f = SpectralField::transform_forward(g, &samples).unwrap();
        assert_relative_eq!(f.coeffs()[[0, 1, 0, 0]].re, 0.5, max_relative = 1e-12);
        assert_relative_eq!(f.coeffs()[[0, 7, 0, 0]].re, 0.5, max_relative = 1e-12);
    }

    #[test]
    fn roundtrip_error_small() {
        let g = grid8();
        let f = random_real_field(&g, 4, 7);
        let back = SpectralField::transform_forward(g.clone(), &f.transform_inverse()).unwrap();
        let err = f.sub(&back).l2_norm() / f.l2_norm();
        assert!(err <= 1e-12, "roundtrip error {err}");
    }

    #[test]
    fn derivative_of_cosine_is_minus_sine() {
        let g = grid8();
        let mut samples = Array4::zeros((1, 8, 8, 8));
        for ((_, i, _, _), v) in samples.indexed_iter_mut() {
            *v = (g.x(0, i)).cos();
        }
        let f = SpectralField::transform_forward(g.clone(), &samples).unwrap();
        let d = f.derivative(0);
        let phys = d.transform_inverse();
        for ((_, i, _, _), v) in phys.indexed_iter() {
            assert_relative_eq!(*v, -(g.x(0, i)).sin(), epsilon = 1e-12);
        }
    }

    #[test]
    fn derivative_along_constant_axis_vanishes() {
        let g = grid8();
        let mut samples = Array4::zeros((1, 8, 8, 8));
        for ((_, i, j, _), v) in samples.indexed_iter_mut() {
            *v = (g.x(0, i) + 2.0 * g.x(1, j)).sin();
        }
        let f = SpectralField::transform_forward(g, &samples).unwrap();
        assert!(f.derivative(2).l2_norm() < 1e-12);
        // Laplacian of e^{i(x1 + 2 x2)}: symbol -(1 + 4) = -5
        let lap = {
            let mut out = f.clone();
            out.apply_multiplier(|xi| {
                Complex64::new(-(xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]), 0.0)
            });
            out
        };
        assert!(lap.sub(&f.scaled(-5.0)).l2_norm() < 1e-10);
    }

    #[test]
    fn dealias_is_idempotent_and_contractive() {
        let g = grid8();
        let f = random_real_field(&g, 3, 11);
        let mut once = f.clone();
        once.dealias();
        let mut twice = once.clone();
        twice.dealias();
        assert!(once.sub(&twice).l2_norm() == 0.0);
        assert!(once.l2_norm() <= f.l2_norm());
        // mode at 0.9 * n/2 must be gone
        assert!(once.coeffs()[[0, 4, 0, 0]].norm() == 0.0); // Nyquist
        assert!(once.coeffs()[[0, 0, 3, 0]].norm() == 0.0); // |m'| = 3 > 8/3
    }

    #[test]
    fn derivative_commutes_with_dealias() {
        let g = grid8();
        let f = random_real_field(&g, 1, 3);
        let a = f.dealiased().derivative(1);
        let b = f.derivative(1).dealiased();
        assert!(a.sub(&b).l2_norm() == 0.0);
    }

    #[test]
    fn parseval_holds() {
        let g = grid8();
        let f = random_real_field(&g, 4, 5);
        let phys = f.transform_inverse();
        let dv = g.volume() / g.num_points() as f64;
        let riemann = (phys.iter().map(|v| v * v).sum::<f64>() * dv).sqrt();
        assert_relative_eq!(riemann, f.l2_norm(), max_relative = 1e-10);
    }

    #[test]
    fn multiplier_ops_are_linear() {
        let g = grid8();
        let u = random_real_field(&g, 3, 21);
        let v = random_real_field(&g, 3, 22);
        let (a, b) = (1.7, -0.4);
        let mut lhs = u.scaled(a).add(&v.scaled(b));
        lhs.derivative_inplace(2);
        let rhs = u.derivative(2).scaled(a).add(&v.derivative(2).scaled(b));
        assert!(lhs.sub(&rhs).l2_norm() / rhs.l2_norm() < 1e-12);
    }

    #[test]
    fn forward_transform_keeps_hermitian_symmetry() {
        let g = grid8();
        let f = random_real_field(&g, 1, 9);
        assert!(f.hermitian_defect() < 1e-13);
    }
}
