//! 3D complex-to-complex FFT over `ndarray` arrays, built on `rustfft`.
//!
//! Transforms are applied axis by axis. Lanes along one axis are independent,
//! so they are processed in parallel when the `parallel` feature is enabled;
//! the sequential driver is always available and both produce bitwise
//! identical output.

use ndarray::{Array3, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

/// Transform direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Unnormalized sum with `e^{-i x.xi}` (physical to spectral, divide by N
    /// afterwards for series coefficients).
    Forward,
    /// Unnormalized sum with `e^{+i x.xi}` (spectral to physical).
    Inverse,
}

/// Lane scheduling mode, used by the benches to compare drivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneMode {
    Sequential,
    /// Rayon-parallel lanes; falls back to sequential when the `parallel`
    /// feature is disabled.
    Parallel,
}

impl LaneMode {
    /// Default mode for the current build.
    pub fn auto() -> Self {
        if cfg!(feature = "parallel") {
            LaneMode::Parallel
        } else {
            LaneMode::Sequential
        }
    }
}

struct PlanCache {
    planner: FftPlanner<f64>,
    plans: HashMap<(usize, bool), Arc<dyn Fft<f64>>>,
}

static PLANS: Mutex<Option<PlanCache>> = Mutex::new(None);

fn plan(len: usize, dir: Direction) -> Arc<dyn Fft<f64>> {
    let mut guard = PLANS.lock().unwrap();
    let cache = guard.get_or_insert_with(|| PlanCache {
        planner: FftPlanner::new(),
        plans: HashMap::new(),
    });
    let key = (len, dir == Direction::Forward);
    if let Some(p) = cache.plans.get(&key) {
        return p.clone();
    }
    let p = match dir {
        Direction::Forward => cache.planner.plan_fft_forward(len),
        Direction::Inverse => cache.planner.plan_fft_inverse(len),
    };
    cache.plans.insert(key, p.clone());
    p
}

fn run_lane(fft: &Arc<dyn Fft<f64>>, lane: &mut ndarray::ArrayViewMut1<'_, Complex64>,
            buf: &mut Vec<Complex64>, scratch: &mut Vec<Complex64>) {
    if let Some(slice) = lane.as_slice_mut() {
        fft.process_with_scratch(slice, scratch);
    } else {
        buf.clear();
        buf.extend(lane.iter().copied());
        fft.process_with_scratch(buf, scratch);
        for (dst, src) in lane.iter_mut().zip(buf.iter()) {
            *dst = *src;
        }
    }
}

/// In-place FFT along one axis of a 3D array.
pub fn fft_axis(data: &mut Array3<Complex64>, axis: usize, dir: Direction, mode: LaneMode) {
    let len = data.shape()[axis];
    let fft = plan(len, dir);
    let scratch_len = fft.get_inplace_scratch_len();
    // Split planes over a non-transform axis; within each plane iterate the
    // lanes of the 2D view sequentially.
    let outer = if axis == 0 { 1 } else { 0 };
    let view_axis = if axis == 0 { 0 } else { axis - 1 };
    let planes = data.axis_iter_mut(Axis(outer));
    let work = |mut plane: ndarray::ArrayViewMut2<'_, Complex64>,
                buf: &mut Vec<Complex64>,
                scratch: &mut Vec<Complex64>| {
        for mut lane in plane.lanes_mut(Axis(view_axis)) {
            run_lane(&fft, &mut lane, buf, scratch);
        }
    };
    match mode {
        LaneMode::Sequential => {
            let mut buf = Vec::with_capacity(len);
            let mut scratch = vec![Complex64::default(); scratch_len];
            for plane in planes {
                work(plane, &mut buf, &mut scratch);
            }
        }
        LaneMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use ndarray::parallel::prelude::*;
                planes.into_par_iter().for_each_init(
                    || (Vec::with_capacity(len), vec![Complex64::default(); scratch_len]),
                    |(buf, scratch), plane| work(plane, buf, scratch),
                );
            }
            #[cfg(not(feature = "parallel"))]
            {
                let mut buf = Vec::with_capacity(len);
                let mut scratch = vec![Complex64::default(); scratch_len];
                for plane in planes {
                    work(plane, &mut buf, &mut scratch);
                }
            }
        }
    }
}

/// In-place 3D FFT (all three axes).
pub fn fft3(data: &mut Array3<Complex64>, dir: Direction, mode: LaneMode) {
    for axis in 0..3 {
        fft_axis(data, axis, dir, mode);
    }
}

/// In-place 2D FFT over both axes of a 2D array (sequential; 2D grids are
/// small compared to the 3D workloads).
pub fn fft2(data: &mut ndarray::Array2<Complex64>, dir: Direction) {
    for axis in 0..2 {
        let len = data.shape()[axis];
        let fft = plan(len, dir);
        let mut buf = Vec::with_capacity(len);
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        for mut lane in data.lanes_mut(Axis(axis)) {
            run_lane(&fft, &mut lane, &mut buf, &mut scratch);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn roundtrip_recovers_input() {
        let n = 8;
        let mut a = Array3::from_shape_fn((n, n, n), |(i, j, k)| {
            Complex64::new((i * 31 + j * 7 + k) as f64 * 0.01, (k * 13 + i) as f64 * 0.02)
        });
        let orig = a.clone();
        fft3(&mut a, Direction::Forward, LaneMode::Sequential);
        fft3(&mut a, Direction::Inverse, LaneMode::Sequential);
        let scale = (n * n * n) as f64;
        for (x, y) in a.iter().zip(orig.iter()) {
            assert!((x / scale - y).norm() < 1e-12);
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let n = 8;
        let mut a = Array3::from_shape_fn((n, n, n), |(i, j, k)| {
            Complex64::new((i + 2 * j + 3 * k) as f64, (i * j) as f64 * 0.1)
        });
        let mut b = a.clone();
        fft3(&mut a, Direction::Forward, LaneMode::Sequential);
        fft3(&mut b, Direction::Forward, LaneMode::Parallel);
        assert_eq!(a, b);
    }
}
