//! Field snapshot files: one JSON header line followed by the flat binary
//! coefficient block (little-endian f64 pairs, row-major over
//! `(component, n1, n2, n3)`).

use crate::field::SpectralField;
use crate::grid::{self, GridSpec};
use crate::{Error, Result};
use ndarray::Array4;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub grid: GridSpec,
    pub components: usize,
    pub time: f64,
    pub run_id: String,
    /// Fixed layout marker for external readers.
    pub layout: String,
}

const LAYOUT: &str = "complex128-le row-major (c, n1, n2, n3)";

pub fn write_snapshot(path: &Path, field: &SpectralField, time: f64, run_id: &str) -> Result<()> {
    let header = SnapshotHeader {
        grid: field.grid().as_ref().clone(),
        components: field.components(),
        time,
        run_id: run_id.to_string(),
        layout: LAYOUT.to_string(),
    };
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    out.reserve(field.coeffs().len() * 16);
    for z in field.coeffs().iter() {
        out.extend_from_slice(&z.re.to_le_bytes());
        out.extend_from_slice(&z.im.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<(SpectralField, SnapshotHeader)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let nl = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::InvalidInput("snapshot missing header line".into()))?;
    let header: SnapshotHeader = serde_json::from_slice(&raw[..nl])?;
    if header.layout != LAYOUT {
        return Err(Error::InvalidInput(format!("unsupported snapshot layout {:?}", header.layout)));
    }
    let grid = grid::rebuild(header.grid.clone())?;
    let [n1, n2, n3] = grid.n();
    let count = header.components * n1 * n2 * n3;
    let body = &raw[nl + 1..];
    if body.len() != count * 16 {
        return Err(Error::InvalidInput(format!(
            "snapshot body has {} bytes, expected {}",
            body.len(),
            count * 16
        )));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in body.chunks_exact(16) {
        let re = f64::from_le_bytes(chunk[..8].try_into().unwrap());
        let im = f64::from_le_bytes(chunk[8..].try_into().unwrap());
        data.push(Complex64::new(re, im));
    }
    let coeffs = Array4::from_shape_vec((header.components, n1, n2, n3), data)
        .map_err(|e| Error::InvalidInput(format!("snapshot shape error: {e}")))?;
    Ok((SpectralField::from_coeffs(grid, coeffs)?, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::random_real_field;
    use std::f64::consts::PI;

    #[test]
    fn snapshot_round_trip_is_bitwise() {
        let g = GridSpec::new([8, 8, 8], [2.0 * PI, 4.0 * PI, 2.0 * PI], 2.0 / 3.0).unwrap();
        let f = random_real_field(&g, 4, 3);
        let dir = std::env::temp_dir().join(format!("geoflow-snap-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f.snap");
        write_snapshot(&path, &f, 0.75, "test-run").unwrap();
        let (g2, header) = read_snapshot(&path).unwrap();
        assert_eq!(header.time, 0.75);
        assert_eq!(header.run_id, "test-run");
        assert_eq!(g2.components(), 4);
        assert!(f.sub(&g2).l2_norm() == 0.0);
        assert_eq!(*g2.grid().as_ref(), *f.grid().as_ref());
        std::fs::remove_dir_all(&dir).ok();
    }
}
