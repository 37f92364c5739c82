//! Slowness maps on the reconstruction grid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export;
use crate::geometry::ReconGrid;

/// Slowness (s/m) per reconstruction cell plus the value assumed outside the
/// grid. Cells are indexed `ix * nz + iz`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlownessMap {
    pub grid: ReconGrid,
    pub values: Vec<f64>,
    /// Slowness of the medium outside the grid, also used for the transmit
    /// launch offset along the array.
    pub exterior: f64,
}

impl SlownessMap {
    pub fn uniform(grid: ReconGrid, slowness: f64) -> Self {
        Self {
            values: vec![slowness; grid.len()],
            grid,
            exterior: slowness,
        }
    }

    pub fn new(grid: ReconGrid, values: Vec<f64>, exterior: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "slowness map has {} values for {} cells",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().chain([&exterior]).any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::NonFinite("slowness map"));
        }
        Ok(Self {
            grid,
            values,
            exterior,
        })
    }

    pub fn value(&self, ix: usize, iz: usize) -> f64 {
        self.values[self.grid.cell_index(ix, iz)]
    }

    /// True when every cell equals the exterior value, i.e. the medium is
    /// homogeneous and delays reduce to closed form.
    pub fn is_uniform(&self) -> bool {
        self.values.iter().all(|&v| v == self.exterior)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * k).collect(),
            exterior: self.exterior * k,
        }
    }

    pub fn sound_speed(&self) -> Vec<f64> {
        self.values.iter().map(|v| 1.0 / v).collect()
    }

    /// Deviation `sigma - sigma0` per cell.
    pub fn deviation(&self, sigma0: f64) -> Vec<f64> {
        self.values.iter().map(|v| v - sigma0).collect()
    }

    /// Speed of sound (m/s) as a CSV matrix, one row per depth.
    pub fn write_sos_csv(&self, path: &Path) -> Result<()> {
        export::write_grid_csv(path, self.grid.nx, self.grid.nz, &self.sound_speed())
    }

    /// Read a map written by [`write_sos_csv`](Self::write_sos_csv).
    pub fn read_sos_csv(path: &Path, grid: ReconGrid, exterior: f64) -> Result<Self> {
        let sos = export::read_grid_csv(path, grid.nx, grid.nz)?;
        Self::new(grid, sos.iter().map(|c| 1.0 / c).collect(), exterior)
    }

    /// Grayscale image of the speed of sound mapped linearly over `window` (m/s).
    pub fn write_sos_pgm(&self, path: &Path, window: (f64, f64)) -> Result<()> {
        let (lo, hi) = window;
        let pixels: Vec<u8> = self
            .sound_speed()
            .iter()
            .map(|c| (((c - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        export::write_pgm(path, self.grid.nx, self.grid.nz, &pixels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2;

    #[test]
    fn uniform_and_scaling() {
        let g = ReconGrid::new(4, 3, 1e-3, 1e-3, Point2::new(0.0, 0.0)).unwrap();
        let m = SlownessMap::uniform(g, 1.0 / 1500.0);
        assert!(m.is_uniform());
        let s = m.scaled(1.01);
        assert!(s.is_uniform());
        assert!((s.values[5] - 1.01 / 1500.0).abs() < 1e-18);
        let mut h = m.clone();
        h.values[2] = 1.0 / 1545.0;
        assert!(!h.is_uniform());
    }

    #[test]
    fn rejects_bad_values() {
        let g = ReconGrid::new(2, 2, 1e-3, 1e-3, Point2::new(0.0, 0.0)).unwrap();
        assert!(SlownessMap::new(g.clone(), vec![1e-3; 3], 1e-3).is_err());
        assert!(SlownessMap::new(g, vec![1e-3, f64::NAN, 1e-3, 1e-3], 1e-3).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let g = ReconGrid::new(3, 2, 1e-3, 1e-3, Point2::new(0.0, 0.0)).unwrap();
        let m = SlownessMap::new(
            g.clone(),
            vec![1.0 / 1500.0, 1.0 / 1510.0, 1.0 / 1520.0, 1.0 / 1530.0, 1.0 / 1540.0, 1.0 / 1550.0],
            1.0 / 1500.0,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sos.csv");
        m.write_sos_csv(&p).unwrap();
        let back = SlownessMap::read_sos_csv(&p, g, 1.0 / 1500.0).unwrap();
        for (a, b) in m.values.iter().zip(&back.values) {
            assert!((a - b).abs() < 1e-18);
        }
    }
}
