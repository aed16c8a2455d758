//! Pseudo-spectral simulation and measurement toolkit for fast-rotating,
//! strongly stratified incompressible fluids on a periodic box.
//!
//! The crate provides:
//!
//! * a spectral core (grid geometry, FFT transforms, differentiation,
//!   dealiasing) in [`grid`] and [`field`],
//! * the Fourier-multiplier operators of rotating/stratified flow
//!   (skew rotation-stratification matrix, Leray projection, potential
//!   vorticity, quasi-geostrophic / oscillating projectors, the wave
//!   eigenbasis of the penalized operator) in [`ops`],
//! * Littlewood-Paley dyadic analysis and the associated norm family
//!   (Sobolev, Besov, Chemin-Lerner, anisotropic, energy) in [`lp`],
//! * right-hand sides for the primitive equations, their quasi-geostrophic
//!   limit, the rotating-fluids system, the auxiliary linear flows and the
//!   error systems in [`systems`],
//! * exact linear flows plus an integrating-factor RK4 stepper in
//!   [`timestep`],
//! * ill-prepared data construction, convergence-rate sweeps and
//!   dispersive-decay probes in [`experiments`].
//!
//! All heavy inner loops (FFT lanes, per-mode multipliers) run on rayon
//! when the `parallel` feature is enabled (default) and fall back to
//! sequential loops otherwise. Reductions are always sequential so results
//! are bitwise identical across worker counts.

pub mod error;
pub mod experiments;
pub mod fft;
pub mod field;
pub mod grid;
pub mod lp;
pub mod ops;
pub mod snapshot;
pub mod systems;
pub mod timestep;

pub use error::Error;
pub use field::SpectralField;
pub use grid::GridSpec;
pub use ops::PhysParams;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Pin the rayon worker count (no-op without the `parallel` feature).
/// Results never depend on it: parallel regions are map-only.
pub fn set_workers(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
    }
}

/// Elementwise `Zip` loop, rayon-parallel when the `parallel` feature is on.
/// Elements are written independently so scheduling never changes results.
#[macro_export]
macro_rules! par_zip {
    ($zip:expr => $f:expr) => {{
        #[cfg(feature = "parallel")]
        {
            $zip.par_for_each($f);
        }
        #[cfg(not(feature = "parallel"))]
        {
            $zip.for_each($f);
        }
    }};
}
